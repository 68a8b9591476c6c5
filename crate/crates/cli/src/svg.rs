//! Minimal static scatter plot of 2-D samples against mode centers.

use std::fmt::Write as _;

use cldm_core::denoiser::Label;
use ndarray::Array2;

const SIZE: f64 = 640.0;
const MARGIN: f64 = 24.0;
const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

/// Samples as coloured dots (grey for unconditional), centers as black
/// crosses. Only the first two columns are drawn.
pub fn scatter(groups: &[(Label, Array2<f64>)], centers: &[Vec<f64>]) -> String {
    let points = groups
        .iter()
        .flat_map(|(_, x)| x.rows().into_iter().map(|r| (r[0], r[1])).collect::<Vec<_>>())
        .chain(centers.iter().map(|c| (c[0], c[1])));
    let (mut lo_x, mut hi_x, mut lo_y, mut hi_y) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for (x, y) in points.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        lo_x = lo_x.min(x);
        hi_x = hi_x.max(x);
        lo_y = lo_y.min(y);
        hi_y = hi_y.max(y);
    }
    if lo_x > hi_x {
        (lo_x, hi_x, lo_y, hi_y) = (0.0, 1.0, 0.0, 1.0);
    }
    let span = (hi_x - lo_x).max(hi_y - lo_y).max(1e-9);
    let px = |x: f64| MARGIN + (x - lo_x) / span * (SIZE - 2.0 * MARGIN);
    let py = |y: f64| SIZE - MARGIN - (y - lo_y) / span * (SIZE - 2.0 * MARGIN);

    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for (label, x) in groups {
        let colour = match label {
            Label::Class(k) => PALETTE[k % PALETTE.len()],
            Label::Null => "#999999",
        };
        let _ = writeln!(out, "<g fill=\"{colour}\" fill-opacity=\"0.6\">");
        for r in x.rows().into_iter().filter(|r| r[0].is_finite() && r[1].is_finite()) {
            let _ = writeln!(out, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2\"/>", px(r[0]), py(r[1]));
        }
        out.push_str("</g>\n");
    }
    out.push_str("<g stroke=\"black\" stroke-width=\"1.5\">\n");
    for c in centers {
        let (x, y) = (px(c[0]), py(c[1]));
        let _ = writeln!(
            out,
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\"/><line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\"/>",
            x - 4.0, y - 4.0, x + 4.0, y + 4.0, x - 4.0, y + 4.0, x + 4.0, y - 4.0
        );
    }
    out.push_str("</g>\n</svg>\n");
    out
}
