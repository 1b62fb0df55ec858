//! SVG line charts of metrics-CSV columns against the iteration column.

use std::fmt::Write as _;

use adld::{Error, Result};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// A named `(iter, value)` polyline.
pub type Series = (String, Vec<(f64, f64)>);

/// One series per requested column; empty cells are skipped.
pub fn read_series(csv: &str, names: &[String]) -> Result<Vec<Series>> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| Error::Parse { line: 1, detail: "empty metrics file".into() })?.split(',').collect();
    let x_col = header.iter().position(|&h| h == "iter").ok_or_else(|| Error::Parse { line: 1, detail: "no 'iter' column".into() })?;
    let cols: Vec<usize> = names
        .iter()
        .map(|n| header.iter().position(|h| h == n).ok_or_else(|| Error::Config(format!("unknown series '{n}'"))))
        .collect::<Result<_>>()?;
    let mut series: Vec<Series> = names.iter().map(|n| (n.clone(), Vec::new())).collect();
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        let num = |c: usize| -> Result<Option<f64>> {
            match cells.get(c).copied().unwrap_or("") {
                "" => Ok(None),
                s => s.parse().map(Some).map_err(|_| Error::Parse { line: i + 2, detail: format!("bad number '{s}'") }),
            }
        };
        let Some(x) = num(x_col)? else { continue };
        for (k, &c) in cols.iter().enumerate() {
            if let Some(y) = num(c)? {
                series[k].1.push((x, y));
            }
        }
    }
    Ok(series)
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// One polyline per series on shared axes; larger values sit higher.
pub fn render_svg(series: &[Series]) -> String {
    let points = || series.iter().flat_map(|(_, p)| p.iter());
    let (x0, x1) = range(points().map(|p| p.0));
    let (y0, y1) = range(points().map(|p| p.1));
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (l, r, t, b) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(s, r#"<path d="M{l} {t} L{l} {b} L{r} {b}" fill="none" stroke="black"/>"#);
    let _ = writeln!(s, r#"<text x="{l}" y="{}" font-size="11" text-anchor="middle">{x0}</text>"#, b + 16.0);
    let _ = writeln!(s, r#"<text x="{r}" y="{}" font-size="11" text-anchor="middle">{x1}</text>"#, b + 16.0);
    let _ = writeln!(s, r#"<text x="{}" y="{b}" font-size="11" text-anchor="end">{y0:.4}</text>"#, l - 4.0);
    let _ = writeln!(s, r#"<text x="{}" y="{t}" font-size="11" text-anchor="end">{y1:.4}</text>"#, l - 4.0);
    for (k, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, coords.join(" "));
        let ly = t + 14.0 * k as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{ly}" font-size="11" fill="{color}">{}</text>"#, r - 120.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_cells_are_skipped() {
        let csv = "iter,a,b\n1,2.0,\n2,1.0,5\n";
        let s = read_series(csv, &["a".into(), "b".into()]).unwrap();
        assert_eq!(s[0].1, vec![(1.0, 2.0), (2.0, 1.0)]);
        assert_eq!(s[1].1, vec![(2.0, 5.0)]);
    }

    #[test]
    fn unknown_series_is_a_config_error() {
        assert!(matches!(read_series("iter,a\n1,2\n", &["z".into()]), Err(Error::Config(_))));
    }
}
