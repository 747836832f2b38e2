//! Word heatmaps on a fixed `[0, 1]` scale, one row per method, for terminals
//! (24-bit ANSI background colours) and HTML.

use std::fmt::Write as _;

use crate::error::ModelError;
use crate::scores::ImportanceScores;

/// Number of distinct shades.
pub const LEVELS: u8 = 10;

/// Shade index for a score; values outside `[0, 1]` are clamped.
pub fn level(score: f64) -> u8 {
    let s = if score.is_nan() { 0.0 } else { score.clamp(0.0, 1.0) };
    ((s * f64::from(LEVELS - 1)).round()) as u8
}

/// White at level 0 to saturated red at the top level.
pub fn shade_rgb(level: u8) -> (u8, u8, u8) {
    let t = f64::from(level.min(LEVELS - 1)) / f64::from(LEVELS - 1);
    let gb = (255.0 - 200.0 * t).round() as u8;
    (255, gb, gb)
}

fn check_stack(stack: &[ImportanceScores]) -> Result<usize, ModelError> {
    let first = stack
        .first()
        .ok_or_else(|| ModelError::Validation("nothing to render".into()))?;
    let n = first.sentences.len();
    for s in stack {
        if s.sentences.len() != n {
            return Err(ModelError::Alignment(format!(
                "{} has {} sentences, {} has {n}",
                s.method,
                s.sentences.len(),
                first.method
            )));
        }
        for (i, (a, b)) in s.sentences.iter().zip(&first.sentences).enumerate() {
            if a.words != b.words {
                return Err(ModelError::Alignment(format!("sentence {i}: {} words differ", s.method)));
            }
        }
    }
    Ok(n)
}

fn label(s: &ImportanceScores) -> String {
    match s.meta.get("label") {
        Some(l) => l.clone(),
        None => s.method.to_string(),
    }
}

/// Terminal rendering: methods stacked in input order under each sentence.
pub fn render_ansi(stack: &[ImportanceScores]) -> Result<String, ModelError> {
    let n = check_stack(stack)?;
    let width = stack.iter().map(|s| label(s).len()).max().unwrap_or(0);
    let mut out = String::new();
    for i in 0..n {
        for s in stack {
            let _ = write!(out, "{:>width$} |", label(s));
            let sent = &s.sentences[i];
            for (w, &v) in sent.words.iter().zip(&sent.scores) {
                let (r, g, b) = shade_rgb(level(v));
                let _ = write!(out, " \x1b[48;2;{r};{g};{b}m\x1b[38;2;0;0;0m{w}\x1b[0m");
            }
            out.push('\n');
        }
        out.push('\n');
    }
    Ok(out)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Self-contained HTML page; each word carries its score as a tooltip.
pub fn render_html(stack: &[ImportanceScores]) -> Result<String, ModelError> {
    let n = check_stack(stack)?;
    let mut out = String::from(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Word scores</title>\n\
         <style>body{font-family:sans-serif}table{border-collapse:collapse;margin-bottom:1em}\
         th{text-align:right;padding-right:.6em;font-weight:normal;color:#555}\
         span{padding:1px 3px;margin:0 1px}</style></head><body>\n",
    );
    for i in 0..n {
        out.push_str("<table>\n");
        for s in stack {
            let _ = write!(out, "<tr><th>{}</th><td>", escape(&label(s)));
            let sent = &s.sentences[i];
            for (w, &v) in sent.words.iter().zip(&sent.scores) {
                let (r, g, b) = shade_rgb(level(v));
                let _ = write!(
                    out,
                    "<span style=\"background:rgb({r},{g},{b})\" title=\"{v:.3}\">{}</span>",
                    escape(w)
                );
            }
            out.push_str("</td></tr>\n");
        }
        out.push_str("</table>\n");
    }
    out.push_str("</body></html>\n");
    Ok(out)
}
