//! Markdown tables for side-by-side comparisons.

/// A GitHub-style table. Short rows are padded with empty cells.
pub fn markdown_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let cols = headers
        .len()
        .max(rows.iter().map(Vec::len).max().unwrap_or(0));
    let mut widths = vec![3; cols];
    for (i, h) in headers.iter().enumerate() {
        widths[i] = widths[i].max(h.len());
    }
    for r in rows {
        for (i, c) in r.iter().enumerate() {
            widths[i] = widths[i].max(c.len());
        }
    }
    let line = |cells: &mut dyn Iterator<Item = &str>| {
        let mut s = String::from("|");
        for w in &widths {
            let c = cells.next().unwrap_or("");
            s.push_str(&format!(" {c:<w$} |"));
        }
        s.push('\n');
        s
    };
    let mut out = line(&mut headers.iter().copied());
    out.push('|');
    for w in &widths {
        out.push_str(&format!("{}|", "-".repeat(w + 2)));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&line(&mut r.iter().map(String::as_str)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aligns_columns() {
        let t = markdown_table(
            &["a", "value"],
            &[vec!["x".into(), "1.5".into()], vec!["long".into()]],
        );
        assert_eq!(
            t,
            "| a    | value |\n|------|-------|\n| x    | 1.5   |\n| long |       |\n"
        );
    }
}
