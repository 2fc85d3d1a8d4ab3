use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Product-limit survival estimate as a right-continuous step function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalCurve {
    /// Distinct times with at least one observed event, ascending.
    pub times: Vec<f64>,
    /// S(t) from `times[i]` up to the next event time.
    pub survival: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
    pub n: usize,
}

impl SurvivalCurve {
    pub fn at(&self, t: f64) -> f64 {
        match self.times.partition_point(|&s| s <= t) {
            0 => 1.0,
            i => self.survival[i - 1],
        }
    }

    pub fn median(&self) -> Option<f64> {
        self.times.iter().zip(&self.survival).find(|(_, &s)| s <= 0.5).map(|(&t, _)| t)
    }
}

/// Kaplan-Meier estimator. Subjects censored at an event time are still at
/// risk at that time.
pub fn km_curve(times: &[f64], observed: &[bool]) -> Result<SurvivalCurve> {
    if times.len() != observed.len() {
        return Err(Error::Shape(format!("{} times for {} flags", times.len(), observed.len())));
    }
    if let Some(t) = times.iter().find(|t| !(t.is_finite() && **t >= 0.0)) {
        return Err(Error::invalid(format!("survival time {t} is not a finite non-negative number")));
    }
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut curve = SurvivalCurve {
        times: Vec::new(),
        survival: Vec::new(),
        at_risk: Vec::new(),
        events: Vec::new(),
        n: times.len(),
    };
    let mut s = 1.0;
    let mut remaining = times.len();
    let mut i = 0;
    while i < order.len() {
        let t = times[order[i]];
        let (mut d, mut leaving) = (0, 0);
        while i < order.len() && times[order[i]] == t {
            d += observed[order[i]] as usize;
            leaving += 1;
            i += 1;
        }
        if d > 0 {
            s *= 1.0 - d as f64 / remaining as f64;
            curve.times.push(t);
            curve.survival.push(s);
            curve.at_risk.push(remaining);
            curve.events.push(d);
        }
        remaining -= leaving;
    }
    Ok(curve)
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 48.0;
const PALETTE: [&str; 8] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666"];

/// Step plot of labelled survival curves over `[0, horizon]`.
pub fn survival_svg(curves: &[(String, SurvivalCurve)], horizon: f64) -> String {
    let horizon = if horizon > 0.0 { horizon } else { 1.0 };
    let x = |t: f64| MARGIN + (t.min(horizon) / horizon) * (WIDTH - 2.0 * MARGIN);
    let y = |s: f64| HEIGHT - MARGIN - s * (HEIGHT - 2.0 * MARGIN);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(
        out,
        r#"<path d="M{l},{t} L{l},{b} L{r},{b}" fill="none" stroke="black"/>"#,
        l = MARGIN,
        t = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN
    );
    let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="12">time (days)</text>"#, WIDTH / 2.0, HEIGHT - 12.0);
    let _ = writeln!(out, r#"<text x="8" y="{}" font-size="12">S(t)</text>"#, MARGIN - 8.0);
    for (k, (label, c)) in curves.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let mut d = format!("M{:.2},{:.2}", x(0.0), y(1.0));
        let mut s = 1.0;
        for (&t, &next) in c.times.iter().zip(&c.survival) {
            if t > horizon {
                break;
            }
            let _ = write!(d, " L{:.2},{:.2} L{:.2},{:.2}", x(t), y(s), x(t), y(next));
            s = next;
        }
        let _ = write!(d, " L{:.2},{:.2}", x(horizon), y(s));
        let _ = writeln!(out, r#"<path d="{d}" fill="none" stroke="{colour}" stroke-width="1.5"/>"#);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="11" fill="{colour}">{}</text>"#,
            WIDTH - MARGIN - 120.0,
            MARGIN + 14.0 * k as f64,
            escape(label)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
