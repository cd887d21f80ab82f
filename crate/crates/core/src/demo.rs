//! Worked example on the smallest interesting instance: a 2x2 feature map
//! with unit zero padding and a 3x3 window. Shows the padded map, the 9x4
//! key matrix, and how its rows are shifted copies of the input while its
//! columns are the flattened per-query windows.

use std::fmt::Write as _;

use crate::im2col::{im2col, Im2ColMatrix};
use crate::tensor::Tensor;
use crate::window;

/// All the pieces of the worked example, exposed for checking as well as
/// printing.
pub struct WorkedExample {
    pub feature: Tensor<f64>,
    pub padded: Tensor<f64>,
    pub matrix: Im2ColMatrix<f64>,
    /// One `(offset, shifted map)` pair per window direction, in row order.
    pub shifted_rows: Vec<((i64, i64), Tensor<f64>)>,
}

/// Build the example: map `[[1, 2], [3, 4]]`, window size 3.
pub fn worked_example() -> WorkedExample {
    let feature =
        Tensor::new([1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).expect("static shape is valid");
    let padded = feature.pad_zero(1, 1).expect("4-D input");
    let matrix = im2col(&feature, 3).expect("odd window");
    let shifted_rows = window::offsets(3)
        .map(|(u, v)| {
            (
                (u, v),
                crate::shift::shift_feature(&feature, u, v).expect("4-D input"),
            )
        })
        .collect();
    WorkedExample {
        feature,
        padded,
        matrix,
        shifted_rows,
    }
}

fn grid_lines(out: &mut String, t: &Tensor<f64>, indent: &str) {
    let (_, h, w, _) = t.dims4().expect("grid tensors are 4-D");
    for hi in 0..h {
        let row: Vec<String> = (0..w).map(|wi| format!("{:3}", t.at4(0, hi, wi, 0))).collect();
        let _ = writeln!(out, "{indent}{}", row.join(" "));
    }
}

/// Render the example as the text the `demo` subcommand prints.
pub fn render(example: &WorkedExample) -> String {
    let mut out = String::new();
    let m = &example.matrix;
    let (h, w, _) = m.origin();
    let hw = h * w;

    let _ = writeln!(out, "2x2 feature map:");
    grid_lines(&mut out, &example.feature, "  ");

    let _ = writeln!(out, "\nwith [1,1] zero padding (4x4):");
    grid_lines(&mut out, &example.padded, "  ");

    let _ = writeln!(
        out,
        "\nkey matrix ({} x {}), one row per shift direction (u,v),\none column per query position (i,j):",
        m.k() * m.k(),
        hw
    );
    let header: Vec<String> = (0..h)
        .flat_map(|i| (0..w).map(move |j| format!("({i},{j})")))
        .collect();
    let _ = writeln!(out, "           {}", header.join("  "));
    for (dir, (u, v)) in window::offsets(m.k()).enumerate() {
        let entries: Vec<String> = (0..hw).map(|q| format!("{:5}", m.entry(dir, q, 0))).collect();
        let _ = writeln!(out, "  ({u:2},{v:2}) {}", entries.join(" "));
    }

    let _ = writeln!(
        out,
        "\neach row, reshaped to 2x2, is the feature map shifted by (u,v):"
    );
    for ((u, v), shifted) in &example.shifted_rows {
        let _ = writeln!(out, "  shift ({u:2},{v:2}):");
        grid_lines(&mut out, shifted, "    ");
    }

    let _ = writeln!(
        out,
        "\neach column, read top to bottom, is the flattened 3x3 window of its query:"
    );
    for i in 0..h {
        for j in 0..w {
            let col = m.column(m.query_index(i, j));
            let vals: Vec<String> = col.data().iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(out, "  query ({i},{j}): [{}]", vals.join(", "));
        }
    }
    out
}
