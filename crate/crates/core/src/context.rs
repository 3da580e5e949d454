//! Context priors: where in the scene the target is expected, as a per-patch gain.

use std::path::Path;

use crate::error::{Result, TctError};

#[derive(Debug, Clone, PartialEq)]
pub enum ContextPrior {
    /// No context: every gain is zero.
    Uniform,
    /// Gaussian bump around `mu = (x, y)` in normalized image coordinates.
    SpatialGaussian { mu: (f64, f64), sigma: f64 },
    /// Explicit row-major gain grid.
    FileLoaded {
        rows: usize,
        cols: usize,
        values: Vec<f64>,
    },
}

/// Per-patch gains for a `(rows, cols)` patch grid, in `[0, g_max]`.
///
/// Patch `j` at grid cell `(gy, gx)` has center `((gx + ½)/cols, (gy + ½)/rows)`.
pub fn context_gain(prior: &ContextPrior, grid: (usize, usize), g_max: f64) -> Result<Vec<f64>> {
    let (rows, cols) = grid;
    if rows == 0 || cols == 0 {
        return Err(TctError::shape("context gain for an empty patch grid"));
    }
    if !(g_max >= 0.0 && g_max.is_finite()) {
        return Err(TctError::input(format!("g_max must be finite and non-negative, got {g_max}")));
    }
    match prior {
        ContextPrior::Uniform => Ok(vec![0.0; rows * cols]),
        ContextPrior::SpatialGaussian { mu, sigma } => {
            if !(*sigma > 0.0 && sigma.is_finite()) || !mu.0.is_finite() || !mu.1.is_finite() {
                return Err(TctError::input(format!(
                    "gaussian prior needs finite mu and sigma > 0, got mu {mu:?}, sigma {sigma}"
                )));
            }
            let denom = 2.0 * sigma * sigma;
            let mut g = Vec::with_capacity(rows * cols);
            for gy in 0..rows {
                let cy = (gy as f64 + 0.5) / rows as f64;
                for gx in 0..cols {
                    let cx = (gx as f64 + 0.5) / cols as f64;
                    let d2 = (cx - mu.0) * (cx - mu.0) + (cy - mu.1) * (cy - mu.1);
                    g.push(g_max * (-d2 / denom).exp());
                }
            }
            Ok(g)
        }
        ContextPrior::FileLoaded {
            rows: r,
            cols: c,
            values,
        } => {
            if (*r, *c) != grid {
                return Err(TctError::input(format!(
                    "prior grid is {r}x{c} but the search image has a {rows}x{cols} patch grid"
                )));
            }
            Ok(values.iter().map(|v| v.clamp(0.0, g_max)).collect())
        }
    }
}

/// Parses the prior file format: a `rows cols` line, then `rows · cols`
/// whitespace-separated gains in row-major order.
pub fn parse_prior(text: &str, source: &str) -> Result<ContextPrior> {
    let mut tokens = text
        .lines()
        .enumerate()
        .flat_map(|(i, line)| line.split_whitespace().map(move |t| (i + 1, t)));
    let mut dim = |what: &str| -> Result<usize> {
        match tokens.next() {
            Some((line, t)) => t
                .parse::<usize>()
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| TctError::parse(source, line, format!("invalid {what} `{t}`"))),
            None => Err(TctError::parse(source, 1, format!("missing {what}"))),
        }
    };
    let rows = dim("row count")?;
    let cols = dim("column count")?;
    let mut values = Vec::with_capacity(rows * cols);
    let mut last_line = 1;
    for (line, t) in tokens {
        last_line = line;
        let v: f64 = t
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| TctError::parse(source, line, format!("invalid gain `{t}`")))?;
        values.push(v);
    }
    if values.len() != rows * cols {
        return Err(TctError::parse(
            source,
            last_line,
            format!("expected {} gains, found {}", rows * cols, values.len()),
        ));
    }
    Ok(ContextPrior::FileLoaded { rows, cols, values })
}

pub fn load_prior(path: &Path) -> Result<ContextPrior> {
    let text = std::fs::read_to_string(path)?;
    parse_prior(&text, &path.display().to_string())
}

/// Writes a gain grid in the prior file format.
pub fn format_prior(rows: usize, cols: usize, values: &[f64]) -> String {
    let mut out = format!("{rows} {cols}\n");
    for row in values.chunks(cols.max(1)) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out += &line.join(" ");
        out.push('\n');
    }
    out
}
