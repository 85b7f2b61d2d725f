//! Token, spatial and temporal embeddings, their fusion, and the node
//! positional encoding.

use ndarray::{concatenate, Array1, Array2, Array3, Axis};

use super::layers::linear;
use crate::error::{Error, Result};

pub const HOURS: usize = 24;
pub const WEEKDAYS: usize = 7;

/// `(P, N, C)` history to `(N, P*C)` rows, step-major within a row.
pub fn flatten_history(history: &Array3<f64>) -> Array2<f64> {
    let (p, n, c) = history.dim();
    Array2::from_shape_fn((n, p * c), |(node, j)| history[[j / c, node, j % c]])
}

/// Shared linear projection of each node's flattened history.
pub fn token_embedding(rows: &Array2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    check_in(rows, w, "token embedding")?;
    Ok(linear(&rows.view(), w, Some(b)))
}

/// `tanh(x W + b)` per node.
pub fn spatial_embedding(rows: &Array2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    check_in(rows, w, "spatial embedding")?;
    Ok(linear(&rows.view(), w, Some(b)).mapv(f64::tanh))
}

fn check_in(rows: &Array2<f64>, w: &Array2<f64>, what: &str) -> Result<()> {
    if rows.ncols() != w.nrows() {
        return Err(Error::shape(format!("{what}: input width {} but weights expect {}", rows.ncols(), w.nrows())));
    }
    Ok(())
}

/// Sum of the hour-of-day and day-of-week table rows.
pub fn temporal_embedding(hour: usize, dow: usize, hour_table: &Array2<f64>, dow_table: &Array2<f64>) -> Result<Array1<f64>> {
    if hour >= HOURS || dow >= WEEKDAYS {
        return Err(Error::param(format!("hour {hour} / weekday {dow} out of range")));
    }
    if hour_table.nrows() != HOURS || dow_table.nrows() != WEEKDAYS {
        return Err(Error::shape("temporal tables need 24 and 7 rows"));
    }
    Ok(&hour_table.row(hour) + &dow_table.row(dow))
}

/// Concatenates `[token | spatial | temporal]` and projects it.
pub fn fuse_embeddings(
    token: &Array2<f64>,
    spatial: &Array2<f64>,
    temporal: &Array2<f64>,
    w: &Array2<f64>,
    b: &Array2<f64>,
) -> Result<Array2<f64>> {
    if token.dim() != spatial.dim() || token.dim() != temporal.dim() {
        return Err(Error::shape("fused embeddings must share one shape"));
    }
    let cat = concatenate(Axis(1), &[token.view(), spatial.view(), temporal.view()])
        .map_err(|e| Error::shape(e.to_string()))?;
    check_in(&cat, w, "fusion")?;
    Ok(linear(&cat.view(), w, Some(b)))
}

/// Sinusoidal encoding of node position: even columns `sin`, odd `cos`.
pub fn positional_encoding(nodes: usize, width: usize) -> Array2<f64> {
    Array2::from_shape_fn((nodes, width), |(pos, i)| {
        let freq = 1.0 / 10000f64.powf((i - i % 2) as f64 / width as f64);
        let angle = pos as f64 * freq;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Low-rank update `L M`.
pub fn lora_delta(l: &Array2<f64>, m: &Array2<f64>) -> Result<Array2<f64>> {
    if l.ncols() != m.nrows() {
        return Err(Error::shape(format!("adapter ranks differ: {} vs {}", l.ncols(), m.nrows())));
    }
    Ok(l.dot(m))
}
