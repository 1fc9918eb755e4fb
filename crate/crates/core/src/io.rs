//! Plain-text exports: CSV for data series, JSON sidecars for metadata.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::Orbit;
use crate::homog::{BEstimate, CoeffFieldDoc, COEFF_FIELD_VERSION};
use crate::observable::PathSample;
use crate::roughpath::RoughDriver;
use crate::sim::EnsembleResult;

/// Full-precision float formatting so re-reads are bit-faithful.
fn fmt(x: f64) -> String {
    format!("{x:.17e}")
}

/// Orbit as CSV with columns t, y1..yM.
pub fn write_orbit_csv(path: &Path, orbit: &Orbit) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let m = orbit.points.first().map_or(0, |p| p.len());
    let header: Vec<String> = std::iter::once("t".to_string())
        .chain((1..=m).map(|i| format!("y{i}")))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for (t, p) in orbit.grid.iter().zip(&orbit.points) {
        let row: Vec<String> = std::iter::once(fmt(*t)).chain(p.iter().map(|x| fmt(*x))).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// PathSample as CSV with columns t, c1..ck.
pub fn write_path_csv(path: &Path, sample: &PathSample, prefix: &str) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let k = sample.dim();
    let header: Vec<String> = std::iter::once("t".to_string())
        .chain((1..=k).map(|i| format!("{prefix}{i}")))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for (t, v) in sample.grid.iter().zip(&sample.values) {
        let row: Vec<String> = std::iter::once(fmt(*t)).chain(v.iter().map(|x| fmt(*x))).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// RoughDriver as CSV (t, W components, WW components row-major) plus a JSON
/// sidecar holding gamma and provenance fields.
pub fn write_driver_csv(
    path: &Path,
    driver: &RoughDriver,
    provenance: &serde_json::Value,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let e = driver.dim();
    let mut header = vec!["t".to_string()];
    for a in 1..=e {
        header.push(format!("w{a}"));
    }
    for a in 1..=e {
        for b in 1..=e {
            header.push(format!("ww{a}{b}"));
        }
    }
    writeln!(w, "{}", header.join(","))?;
    for (k, t) in driver.w.grid.iter().enumerate() {
        let row: Vec<String> = std::iter::once(fmt(*t))
            .chain(driver.w.values[k].iter().map(|x| fmt(*x)))
            .chain(driver.ww[k].iter().map(|x| fmt(*x)))
            .collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;

    let sidecar = path.with_extension("json");
    let mut meta = provenance.clone();
    if let serde_json::Value::Object(map) = &mut meta {
        map.insert("gamma".into(), serde_json::json!(driver.gamma));
    }
    let f = File::create(sidecar)?;
    serde_json::to_writer_pretty(BufWriter::new(f), &meta).map_err(std::io::Error::other)?;
    Ok(())
}

/// Coefficient field as versioned JSON.
pub fn write_coeff_field(path: &Path, doc: &CoeffFieldDoc) -> Result<()> {
    let f = File::create(path)?;
    serde_json::to_writer_pretty(BufWriter::new(f), doc).map_err(std::io::Error::other)?;
    Ok(())
}

/// Read a coefficient field, rejecting unknown versions.
pub fn read_coeff_field(path: &Path) -> Result<CoeffFieldDoc> {
    let text = std::fs::read_to_string(path)?;
    let doc: CoeffFieldDoc =
        serde_json::from_str(&text).map_err(|e| Error::InvalidInput(e.to_string()))?;
    if doc.version != COEFF_FIELD_VERSION {
        return Err(Error::InvalidInput(format!(
            "coefficient field version {} (supported: {COEFF_FIELD_VERSION})",
            doc.version
        )));
    }
    Ok(doc)
}

/// Append one estimate row to a CSV log, writing the header when the file is
/// new. Meta entries are flattened to key=value pairs in one column.
pub fn append_estimate_csv(path: &Path, label: &str, est: &BEstimate) -> Result<()> {
    let fresh = !path.exists();
    let mut w = BufWriter::new(File::options().create(true).append(true).open(path)?);
    if fresh {
        writeln!(w, "label,method,value,std_error,meta")?;
    }
    let meta: Vec<String> = est.meta.iter().map(|(k, v)| format!("{k}={}", fmt(*v))).collect();
    writeln!(
        w,
        "{label},{},{},{},{}",
        serde_json::to_string(&est.method).map_err(std::io::Error::other)?.trim_matches('"'),
        fmt(est.value),
        fmt(est.std_error),
        meta.join(";")
    )?;
    w.flush()?;
    Ok(())
}

/// Ensemble endpoints as CSV (member, escape flag, x at T) plus a JSON
/// sidecar with the run metadata. Escaped members keep their row with the
/// flag set and empty coordinates.
pub fn write_ensemble_csv(
    path: &Path,
    result: &EnsembleResult,
    metadata: &serde_json::Value,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let d = result.endpoints.first().map_or(0, |x| x.len());
    let header: Vec<String> = ["member".to_string(), "escaped".to_string()]
        .into_iter()
        .chain((1..=d).map(|i| format!("x{i}")))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    // surviving members come first in stored order; escapes carry no state
    let mut member = 0usize;
    for x in &result.endpoints {
        let row: Vec<String> = [member.to_string(), "0".to_string()]
            .into_iter()
            .chain(x.iter().map(|v| fmt(*v)))
            .collect();
        writeln!(w, "{}", row.join(","))?;
        member += 1;
    }
    for _ in 0..result.escapes {
        let row: Vec<String> = [member.to_string(), "1".to_string()]
            .into_iter()
            .chain((0..d).map(|_| String::new()))
            .collect();
        writeln!(w, "{}", row.join(","))?;
        member += 1;
    }
    w.flush()?;

    let mut meta = metadata.clone();
    if let serde_json::Value::Object(map) = &mut meta {
        map.insert("eps".into(), serde_json::json!(result.eps));
        map.insert("seeds".into(), serde_json::json!(result.seeds));
        map.insert("escapes".into(), serde_json::json!(result.escapes));
        map.insert(
            "members".into(),
            serde_json::json!(result.endpoints.len() + result.escapes),
        );
    }
    let f = File::create(path.with_extension("json"))?;
    serde_json::to_writer_pretty(BufWriter::new(f), &meta).map_err(std::io::Error::other)?;
    Ok(())
}

/// Any serializable report as pretty JSON.
pub fn write_report_json<T: serde::Serialize>(path: &Path, report: &T) -> Result<()> {
    let f = File::create(path)?;
    serde_json::to_writer_pretty(BufWriter::new(f), report).map_err(std::io::Error::other)?;
    Ok(())
}

/// (x, y) series as a two-column CSV for external plotting.
pub fn write_series_csv(path: &Path, xlabel: &str, ylabel: &str, series: &[(f64, f64)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{xlabel},{ylabel}")?;
    for (x, y) in series {
        writeln!(w, "{},{}", fmt(*x), fmt(*y))?;
    }
    w.flush()?;
    Ok(())
}
