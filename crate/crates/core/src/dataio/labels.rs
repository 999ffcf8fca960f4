//! YOLO text labels: one `class cx cy w h` line per object, normalized.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::loss::Annotation;

/// Parses a label file body. Blank lines are skipped; classes must be below
/// `num_classes` and every coordinate must lie in `[0, 1]` with positive
/// width and height.
pub fn parse_label_file(text: &str, num_classes: usize) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 5 {
            return Err(Error::Label {
                line: line_no,
                msg: format!("expected 5 fields `class cx cy w h`, found {}", fields.len()),
            });
        }
        let class_id: usize = fields[0].parse().map_err(|_| Error::Label {
            line: line_no,
            msg: format!("class `{}` is not a non-negative integer", fields[0]),
        })?;
        if class_id >= num_classes {
            return Err(Error::Label {
                line: line_no,
                msg: format!("class {class_id} out of range [0, {num_classes})"),
            });
        }
        let mut v = [0.0; 4];
        for (k, name) in ["cx", "cy", "w", "h"].iter().enumerate() {
            let raw = fields[k + 1];
            let x: f64 = raw.parse().map_err(|_| Error::Label {
                line: line_no,
                msg: format!("field {name} `{raw}` is not a number"),
            })?;
            let ok = if k < 2 {
                (0.0..=1.0).contains(&x)
            } else {
                x > 0.0 && x <= 1.0
            };
            if !ok {
                return Err(Error::Label {
                    line: line_no,
                    msg: format!("field {name} = {x} out of range"),
                });
            }
            v[k] = x;
        }
        out.push(Annotation::new(class_id, v[0], v[1], v[2], v[3]));
    }
    Ok(out)
}

/// Formats annotations with six decimal places.
pub fn write_label_file(annotations: &[Annotation]) -> String {
    let mut s = String::new();
    for a in annotations {
        let [cx, cy, w, h] = a.cxcywh();
        let _ = writeln!(s, "{} {cx:.6} {cy:.6} {w:.6} {h:.6}", a.class_id);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_one_line() {
        let a = parse_label_file("0 0.5 0.5 0.2 0.3", 1).unwrap();
        assert_eq!(a, vec![Annotation::new(0, 0.5, 0.5, 0.2, 0.3)]);
        assert!(parse_label_file("", 1).unwrap().is_empty());
        assert!(parse_label_file("\n  \n", 1).unwrap().is_empty());
    }

    #[test]
    fn range_and_syntax_errors() {
        let err = parse_label_file("0 1.5 0.5 0.2 0.3", 1).unwrap_err().to_string();
        assert!(err.contains("cx"), "{err}");
        assert!(err.contains("line 1"), "{err}");
        let err = parse_label_file("0 0.5 0.5 0.2 0.3\n0 0.5 0.5 0.2", 1).unwrap_err();
        assert!(matches!(err, Error::Label { line: 2, .. }));
        assert!(parse_label_file("3 0.5 0.5 0.2 0.3", 2).is_err());
        assert!(parse_label_file("0 0.5 0.5 0 0.3", 1).is_err());
        assert!(parse_label_file("x 0.5 0.5 0.2 0.3", 1).is_err());
    }

    proptest! {
        #[test]
        fn write_then_parse_roundtrips(
            boxes in prop::collection::vec((0usize..3, 0.0f64..=1.0, 0.0f64..=1.0, 0.001f64..=1.0, 0.001f64..=1.0), 0..20)
        ) {
            let anns: Vec<Annotation> = boxes.iter().map(|&(c, x, y, w, h)| Annotation::new(c, x, y, w, h)).collect();
            let back = parse_label_file(&write_label_file(&anns), 3).unwrap();
            prop_assert_eq!(back.len(), anns.len());
            for (a, b) in anns.iter().zip(&back) {
                prop_assert_eq!(a.class_id, b.class_id);
                for (x, y) in a.cxcywh().iter().zip(b.cxcywh()) {
                    prop_assert!((x - y).abs() <= 5e-7);
                }
            }
        }
    }
}
