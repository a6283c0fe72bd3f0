use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A `[T, C]` window with a 0-based class label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledWindow {
    pub window: Tensor<f32>,
    pub label: usize,
}

#[derive(Debug)]
struct Header {
    t: usize,
    c: usize,
    k: usize,
}

fn parse_header(line: &str) -> Result<Header> {
    let body = line
        .trim()
        .strip_prefix('#')
        .ok_or_else(|| Error::Data("labeled-window file must start with `# T=.. C=.. K=..`".into()))?;
    let (mut t, mut c, mut k) = (None, None, None);
    for tok in body.split_whitespace() {
        let (key, val) = tok
            .split_once('=')
            .ok_or_else(|| Error::Data(format!("bad header token `{tok}`")))?;
        let v: usize = val
            .parse()
            .map_err(|_| Error::Data(format!("bad header value `{tok}`")))?;
        match key {
            "T" => t = Some(v),
            "C" => c = Some(v),
            "K" => k = Some(v),
            _ => return Err(Error::Data(format!("unknown header key `{key}`"))),
        }
    }
    match (t, c, k) {
        (Some(t), Some(c), Some(k)) if t > 0 && c > 0 && k > 0 => Ok(Header { t, c, k }),
        _ => Err(Error::Data("header needs positive T, C and K".into())),
    }
}

/// Reads the labeled-window text format: a `# T=<int> C=<int> K=<int>`
/// header, then one `label,v(0,0),v(0,1),…,v(T-1,C-1)` line per example.
pub fn load_labeled_windows(path: impl AsRef<Path>) -> Result<(Vec<LabeledWindow>, usize)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labeled_windows(&text)
}

pub(crate) fn parse_labeled_windows(text: &str) -> Result<(Vec<LabeledWindow>, usize)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::Data("empty labeled-window file".into()))?;
    let h = parse_header(first)?;
    let mut out = Vec::new();
    for (i, line) in lines {
        let row = i + 1;
        let mut fields = line.split(',');
        let label_tok = fields.next().unwrap_or("").trim();
        let label: usize = label_tok
            .parse()
            .ok()
            .filter(|&l| l < h.k)
            .ok_or_else(|| Error::Ingest {
                row,
                column: 1,
                detail: format!("unknown label `{label_tok}` (K = {})", h.k),
            })?;
        let values: Vec<f32> = fields
            .enumerate()
            .map(|(j, f)| {
                f.trim()
                    .parse::<f32>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Ingest {
                        row,
                        column: j + 2,
                        detail: format!("bad value `{f}`"),
                    })
            })
            .collect::<Result<_>>()?;
        if values.len() != h.t * h.c {
            return Err(Error::Ingest {
                row,
                column: values.len() + 1,
                detail: format!("expected {} values for T={} C={}", h.t * h.c, h.t, h.c),
            });
        }
        out.push(LabeledWindow {
            window: Tensor::new(vec![h.t, h.c], values)?,
            label,
        });
    }
    if out.is_empty() {
        return Err(Error::Data("no examples".into()));
    }
    Ok((out, h.k))
}

/// Writes windows in the format read by [`load_labeled_windows`].
pub fn write_labeled_windows(
    path: impl AsRef<Path>,
    windows: &[LabeledWindow],
    classes: usize,
) -> Result<()> {
    let first = windows
        .first()
        .ok_or_else(|| Error::Data("no examples".into()))?;
    let (t, c) = (first.window.rows(), first.window.cols());
    let mut s = format!("# T={t} C={c} K={classes}\n");
    for w in windows {
        if w.window.dims() != [t, c] {
            return Err(Error::Data("windows have inconsistent shapes".into()));
        }
        write!(s, "{}", w.label).unwrap();
        for v in w.window.data() {
            // `{}` on f32 prints the shortest representation that round-trips
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    let path = path.as_ref();
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_labeled;

    #[test]
    fn two_rows_of_four_by_one() {
        let (w, k) = parse_labeled_windows("# T=4 C=1 K=2\n0,1,2,3,4\n1,5,6,7,8\n").unwrap();
        assert_eq!(k, 2);
        assert_eq!(w.len(), 2);
        assert_eq!(w[1].window.dims(), &[4, 1]);
        assert_eq!(w[1].label, 1);
    }

    #[test]
    fn empty_body_is_rejected() {
        let err = parse_labeled_windows("# T=4 C=1 K=2\n").unwrap_err();
        assert!(err.to_string().contains("no examples"));
    }

    #[test]
    fn inconsistent_rows_and_labels_are_rejected() {
        assert!(parse_labeled_windows("# T=2 C=1 K=2\n0,1\n").is_err());
        assert!(parse_labeled_windows("# T=2 C=1 K=2\n2,1,1\n").is_err());
        assert!(parse_labeled_windows("# T=2 C=1 K=2\ncat,1,1\n").is_err());
    }

    #[test]
    fn synthetic_file_round_trips() {
        let data = synthetic_labeled(30, 16, 2, 3, 11);
        let f = tempfile::NamedTempFile::new().unwrap();
        write_labeled_windows(f.path(), &data, 3).unwrap();
        let (back, k) = load_labeled_windows(f.path()).unwrap();
        assert_eq!(k, 3);
        assert_eq!(back, data);
    }
}
