//! Report serialization: one TOML document per report, CSV tables for
//! plotting and a static SVG bar chart.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fsutil;

pub fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Format(format!("TOML encode: {e}")))
}

pub fn write_toml<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    fsutil::write_atomic(path, to_toml(value)?.as_bytes())
}

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fsutil::read(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Parse { path: path.into(), line: 0, msg: e.to_string() })
}

/// Writes `rows` under `header` as CSV.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Format(format!("CSV: {e}"));
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(format!("CSV: {e}")))?;
    fsutil::write_atomic(path, &bytes)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Horizontal bar chart, one bar per `(label, value)`, with optional error
/// whiskers.
pub fn bar_chart_svg(title: &str, bars: &[(String, f64, Option<f64>)]) -> String {
    const ROW: f64 = 28.0;
    const LEFT: f64 = 180.0;
    const WIDTH: f64 = 420.0;
    let max = bars
        .iter()
        .map(|(_, v, e)| v + e.unwrap_or(0.0))
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let height = 40.0 + ROW * bars.len() as f64;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <text x=\"8\" y=\"20\" font-size=\"14\">{t}</text>\n",
        w = LEFT + WIDTH + 90.0,
        t = escape(title)
    );
    for (i, (label, v, err)) in bars.iter().enumerate() {
        let y = 32.0 + ROW * i as f64;
        let len = WIDTH * v / max;
        svg += &format!(
            "<text x=\"8\" y=\"{ty}\">{l}</text>\n<rect x=\"{LEFT}\" y=\"{y}\" width=\"{len:.2}\" height=\"{bh}\" fill=\"#4a7ab7\"/>\n\
             <text x=\"{vx:.2}\" y=\"{ty}\">{v:.4}</text>\n",
            ty = y + 14.0,
            l = escape(label),
            bh = ROW - 8.0,
            vx = LEFT + len + 6.0,
        );
        if let Some(e) = err {
            let (x0, x1) = (LEFT + WIDTH * (v - e).max(0.0) / max, LEFT + WIDTH * (v + e) / max);
            svg += &format!(
                "<line x1=\"{x0:.2}\" x2=\"{x1:.2}\" y1=\"{cy}\" y2=\"{cy}\" stroke=\"black\"/>\n",
                cy = y + (ROW - 8.0) / 2.0
            );
        }
    }
    svg + "</svg>\n"
}

pub fn write_svg(path: &Path, svg: &str) -> Result<()> {
    fsutil::write_atomic(path, svg.as_bytes())
}
