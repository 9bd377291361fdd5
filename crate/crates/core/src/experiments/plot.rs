//! Minimal SVG renderings of emitted CSV tables.
//!
//! Plots only read the CSV text they are handed, so every figure can be
//! regenerated from the CSV alone.

use std::fmt::Write;

use crate::error::{Error, Result};

/// Parsed CSV: header plus rows of raw cells.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn parse(csv: &str) -> Result<Self> {
        let mut lines = csv.lines().filter(|l| !l.is_empty());
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::Format("empty CSV".into()))?
            .split(',')
            .map(str::to_string)
            .collect();
        let rows: Vec<Vec<String>> = lines
            .map(|l| l.split(',').map(str::to_string).collect::<Vec<_>>())
            .collect();
        if let Some(r) = rows.iter().find(|r| r.len() != header.len()) {
            return Err(Error::Format(format!(
                "CSV row has {} cells, header has {}",
                r.len(),
                header.len()
            )));
        }
        Ok(Self { header, rows })
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("CSV has no column {name:?}")))
    }

    /// Column as floats; unparsable cells become NaN.
    pub fn floats(&self, name: &str) -> Result<Vec<f64>> {
        let c = self.column(name)?;
        Ok(self
            .rows
            .iter()
            .map(|r| r[c].parse().unwrap_or(f64::NAN))
            .collect())
    }

    pub fn strings(&self, name: &str) -> Result<Vec<String>> {
        let c = self.column(name)?;
        Ok(self.rows.iter().map(|r| r[c].clone()).collect())
    }
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

pub struct Axis {
    pub label: String,
    pub log: bool,
}

impl Axis {
    pub fn linear(label: &str) -> Self {
        Self {
            label: label.into(),
            log: false,
        }
    }

    pub fn log(label: &str) -> Self {
        Self {
            label: label.into(),
            log: true,
        }
    }

    fn tf(&self, v: f64) -> f64 {
        if self.log {
            v.log10()
        } else {
            v
        }
    }
}

/// One series: `(name, y column, dashed)`.
pub struct Series<'a> {
    pub name: &'a str,
    pub column: &'a str,
    pub dashed: bool,
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn header(out: &mut String, title: &str) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">
<rect width="100%" height="100%" fill="white"/>
<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>
"#,
        W / 2.0,
        escape(title)
    );
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line plot of several columns against `x_col`.
pub fn line_plot(
    csv: &str,
    title: &str,
    x_col: &str,
    x: Axis,
    y: Axis,
    series: &[Series],
) -> Result<String> {
    let t = Table::parse(csv)?;
    let xs: Vec<f64> = t.floats(x_col)?.into_iter().map(|v| x.tf(v)).collect();
    let ys: Vec<Vec<f64>> = series
        .iter()
        .map(|s| Ok(t.floats(s.column)?.into_iter().map(|v| y.tf(v)).collect()))
        .collect::<Result<_>>()?;
    let (x0, x1) = range(xs.iter().copied());
    let (y0, y1) = range(ys.iter().flatten().copied());
    let px = |v: f64| PAD + (v - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let py = |v: f64| H - PAD - (v - y0) / (y1 - y0) * (H - 2.0 * PAD);

    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, &x, &y, (x0, x1), (y0, y1));
    for (i, (s, yv)) in series.iter().zip(&ys).enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = xs
            .iter()
            .zip(yv)
            .filter(|(a, b)| a.is_finite() && b.is_finite())
            .map(|(a, b)| format!("{:.2},{:.2}", px(*a), py(*b)))
            .collect();
        let dash = if s.dashed { r#" stroke-dasharray="6,4""# } else { "" };
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2"{dash} points="{}"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            W - PAD - 150.0,
            PAD + 16.0 * i as f64,
            escape(s.name)
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

fn axes(out: &mut String, x: &Axis, y: &Axis, xr: (f64, f64), yr: (f64, f64)) {
    let _ = writeln!(
        out,
        r#"<line x1="{PAD}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/>
<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{b}" stroke="black"/>
<text x="{cx}" y="{xl}" text-anchor="middle">{xlab}</text>
<text x="15" y="{cy}" text-anchor="middle" transform="rotate(-90 15 {cy})">{ylab}</text>
<text x="{PAD}" y="{tick}" text-anchor="middle">{x0}</text>
<text x="{r}" y="{tick}" text-anchor="middle">{x1}</text>
<text x="{yt}" y="{b}" text-anchor="end">{y0}</text>
<text x="{yt}" y="{PAD}" text-anchor="end">{y1}</text>"#,
        b = H - PAD,
        r = W - PAD,
        cx = W / 2.0,
        cy = H / 2.0,
        xl = H - 15.0,
        tick = H - PAD + 15.0,
        yt = PAD - 5.0,
        xlab = escape(&axis_label(x)),
        ylab = escape(&axis_label(y)),
        x0 = tick_label(xr.0, x.log),
        x1 = tick_label(xr.1, x.log),
        y0 = tick_label(yr.0, y.log),
        y1 = tick_label(yr.1, y.log),
    );
}

fn axis_label(a: &Axis) -> String {
    if a.log {
        format!("{} (log)", a.label)
    } else {
        a.label.clone()
    }
}

fn tick_label(v: f64, log: bool) -> String {
    let v = if log { 10f64.powf(v) } else { v };
    format!("{v:.3}")
}

/// Grouped bars: one group per row (labelled by `label_col`), one bar per
/// value column, with optional error columns.
pub fn bar_plot(
    csv: &str,
    title: &str,
    label_col: &str,
    bars: &[(&str, Option<&str>)],
) -> Result<String> {
    let t = Table::parse(csv)?;
    let labels = t.strings(label_col)?;
    let vals: Vec<Vec<f64>> = bars.iter().map(|(c, _)| t.floats(c)).collect::<Result<_>>()?;
    let errs: Vec<Vec<f64>> = bars
        .iter()
        .map(|(_, e)| match e {
            Some(c) => t.floats(c),
            None => Ok(vec![0.0; labels.len()]),
        })
        .collect::<Result<_>>()?;
    let hi = vals
        .iter()
        .zip(&errs)
        .flat_map(|(v, e)| v.iter().zip(e).map(|(a, b)| a + b))
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let group_w = (W - 2.0 * PAD) / labels.len().max(1) as f64;
    let bar_w = group_w * 0.8 / bars.len().max(1) as f64;
    let py = |v: f64| H - PAD - v / hi * (H - 2.0 * PAD);

    let mut out = String::new();
    header(&mut out, title);
    let _ = writeln!(
        out,
        r#"<line x1="{PAD}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/>
<text x="{yt}" y="{PAD}" text-anchor="end">{hi:.3}</text>"#,
        b = H - PAD,
        r = W - PAD,
        yt = PAD - 5.0
    );
    for (g, label) in labels.iter().enumerate() {
        let gx = PAD + g as f64 * group_w + group_w * 0.1;
        for (b, (vals, errs)) in vals.iter().zip(&errs).enumerate() {
            let v = vals[g];
            if !v.is_finite() {
                continue;
            }
            let x = gx + b as f64 * bar_w;
            let _ = writeln!(
                out,
                r#"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                py(v),
                bar_w * 0.9,
                H - PAD - py(v),
                COLORS[b % COLORS.len()]
            );
            let e = errs[g];
            if e > 0.0 && e.is_finite() {
                let cx = x + bar_w * 0.45;
                let _ = writeln!(
                    out,
                    r#"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="black"/>"#,
                    py(v - e),
                    py(v + e)
                );
            }
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{}" text-anchor="middle" font-size="10">{}</text>"#,
            gx + group_w * 0.4,
            H - PAD + 15.0,
            escape(label)
        );
    }
    for (b, (c, _)) in bars.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" fill="{}">{}</text>"#,
            W - PAD - 100.0,
            PAD + 16.0 * b as f64,
            COLORS[b % COLORS.len()],
            escape(c)
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Grid of RGB thumbnails, one row per query. Each image is given as
/// `(size, CHW pixels)`.
pub fn image_grid(title: &str, rows: &[Vec<(usize, Vec<f64>)>], cell: f64) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let gap = 6.0;
    let width = cols as f64 * (cell + gap) + gap;
    let height = rows.len() as f64 * (cell + gap) + gap + 24.0;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">
<rect width="100%" height="100%" fill="white"/>
<text x="{gap}" y="16">{}</text>"#,
        escape(title)
    );
    for (r, row) in rows.iter().enumerate() {
        for (c, (size, px)) in row.iter().enumerate() {
            let ox = gap + c as f64 * (cell + gap);
            let oy = 24.0 + gap + r as f64 * (cell + gap);
            let s = cell / *size as f64;
            let plane = size * size;
            for y in 0..*size {
                for x in 0..*size {
                    let ch = |k: usize| (px[k * plane + y * size + x].clamp(0.0, 1.0) * 255.0) as u8;
                    let _ = writeln!(
                        out,
                        r##"<rect x="{:.2}" y="{:.2}" width="{s:.2}" height="{s:.2}" fill="#{:02x}{:02x}{:02x}"/>"##,
                        ox + x as f64 * s,
                        oy + y as f64 * s,
                        ch(0),
                        ch(1),
                        ch(2)
                    );
                }
            }
        }
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_plot() {
        let csv = "p,scl,dscl\n1,0.9,0.11\n10,0.1,0.11\n";
        let t = Table::parse(csv).unwrap();
        assert_eq!(t.floats("scl").unwrap(), vec![0.9, 0.1]);
        assert!(t.column("nope").is_err());
        let svg = line_plot(
            csv,
            "ratios",
            "p",
            Axis::log("|P|"),
            Axis::log("ratio"),
            &[
                Series {
                    name: "SCL",
                    column: "scl",
                    dashed: false,
                },
                Series {
                    name: "DSCL",
                    column: "dscl",
                    dashed: true,
                },
            ],
        )
        .unwrap();
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        // identical CSV renders identically
        let bars = bar_plot(csv, "b", "p", &[("scl", None), ("dscl", Some("scl"))]).unwrap();
        assert_eq!(bars, bar_plot(csv, "b", "p", &[("scl", None), ("dscl", Some("scl"))]).unwrap());
    }

    #[test]
    fn ragged_csv_rejected() {
        assert!(Table::parse("a,b\n1\n").is_err());
        assert!(Table::parse("").is_err());
    }
}
