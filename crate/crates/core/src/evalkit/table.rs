use serde::Serialize;

use crate::error::{Error, Result};

/// Left-aligned first column, right-aligned remaining columns, two-space gutters.
pub fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let n = headers.len();
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &mut dyn Iterator<Item = &str>| {
        let mut out = String::new();
        for (i, cell) in cells.enumerate().take(n) {
            if i > 0 {
                out.push_str("  ");
            }
            let pad = widths[i] - cell.chars().count();
            if i == 0 {
                out.push_str(cell);
                out.extend(std::iter::repeat_n(' ', pad));
            } else {
                out.extend(std::iter::repeat_n(' ', pad));
                out.push_str(cell);
            }
        }
        out.trim_end().to_string()
    };
    let mut out = line(&mut headers.iter().copied());
    out.push('\n');
    let rule: usize = widths.iter().sum::<usize>() + 2 * n.saturating_sub(1);
    out.push_str(&"-".repeat(rule));
    out.push('\n');
    for row in rows {
        out.push_str(&line(&mut row.iter().map(String::as_str)));
        out.push('\n');
    }
    out
}

/// One JSON object per line.
pub fn to_ndjson<S: Serialize>(rows: &[S]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Validation(format!("unserializable row: {e}")))?);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn columns_align() {
        let t = render_table(
            &["method", "O-CCC"],
            &[vec!["finetuned".into(), "0.5".into()], vec!["x".into(), "0.125".into()]],
        );
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "method     O-CCC");
        assert_eq!(lines[1], "----------------");
        assert_eq!(lines[2], "finetuned    0.5");
        assert_eq!(lines[3], "x          0.125");
    }

    #[test]
    fn ndjson_one_object_per_line() {
        #[derive(Serialize)]
        struct R {
            a: u8,
        }
        assert_eq!(to_ndjson(&[R { a: 1 }, R { a: 2 }]).unwrap(), "{\"a\":1}\n{\"a\":2}\n");
    }
}
