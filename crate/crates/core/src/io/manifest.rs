//! Selection manifests.
//!
//! The writer is hand-rolled so the bytes are fully determined by the value:
//! keys in a fixed order, classes by ascending id, selected images by
//! ascending image id, and every real printed with exactly six decimals.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::engine::SelectionManifest;
use crate::error::{PalError, Result};

fn real(v: f64) -> String {
    let s = format!("{v:.6}");
    if s == "-0.000000" {
        "0.000000".to_string()
    } else {
        s
    }
}

pub fn render_selection_manifest(m: &SelectionManifest) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{{");
    let _ = writeln!(out, "  \"round\": {},", m.round);
    let _ = writeln!(out, "  \"budget\": {},", m.budget);
    let mut classes: Vec<_> = m.per_class.iter().collect();
    classes.sort_by_key(|c| c.class_id);
    if classes.is_empty() {
        let _ = writeln!(out, "  \"per_class\": [],");
    } else {
        let _ = writeln!(out, "  \"per_class\": [");
        for (ci, c) in classes.iter().enumerate() {
            let _ = writeln!(out, "    {{");
            let _ = writeln!(out, "      \"class_id\": {},", c.class_id);
            let _ = writeln!(out, "      \"n_labelled\": {},", c.n_labelled);
            let _ = writeln!(out, "      \"n_unlabelled\": {},", c.n_unlabelled);
            let _ = writeln!(out, "      \"r_c\": {},", real(c.r_c));
            let _ = writeln!(out, "      \"capacity\": {},", c.capacity);
            let _ = writeln!(out, "      \"b_c\": {},", c.b_c);
            let _ = writeln!(out, "      \"shortlisted\": {},", c.shortlisted);
            let _ = writeln!(out, "      \"deficit\": {},", c.deficit);
            let mut sel: Vec<_> = c.selected.iter().collect();
            sel.sort_by_key(|s| s.image_id);
            if sel.is_empty() {
                let _ = writeln!(out, "      \"selected\": []");
            } else {
                let _ = writeln!(out, "      \"selected\": [");
                for (si, s) in sel.iter().enumerate() {
                    let _ = write!(
                        out,
                        "        {{\"image_id\": {}, \"instance\": {}, \"lius\": {}, \"cwie\": {}, \"rcdi\": {}, \"rcsp\": {}, \"score\": {}}}",
                        s.image_id,
                        s.instance,
                        real(s.lius),
                        real(s.cwie),
                        real(s.rcdi),
                        real(s.rcsp),
                        real(s.score)
                    );
                    let _ = writeln!(out, "{}", if si + 1 < sel.len() { "," } else { "" });
                }
                let _ = writeln!(out, "      ]");
            }
            let _ = writeln!(out, "    }}{}", if ci + 1 < classes.len() { "," } else { "" });
        }
        let _ = writeln!(out, "  ],");
    }
    let t = &m.totals;
    let _ = writeln!(
        out,
        "  \"totals\": {{\"budget\": {}, \"allocated\": {}, \"selected\": {}, \"deficit\": {}}}",
        t.budget, t.allocated, t.selected, t.deficit
    );
    let _ = writeln!(out, "}}");
    out
}

pub fn write_selection_manifest(m: &SelectionManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, render_selection_manifest(m)).map_err(|e| PalError::io(path, e))
}

pub fn load_selection_manifest(path: impl AsRef<Path>) -> Result<SelectionManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| PalError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| PalError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })
}
