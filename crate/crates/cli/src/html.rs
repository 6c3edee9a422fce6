//! Static HTML contact sheet: each query followed by its top results.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rmac_core::backbone::ImageDir;
use rmac_core::retrieval::{GroundTruth, RankingResult};

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn src(images: &ImageDir, id: &str, base: Option<&Path>) -> Option<String> {
    let path = images.path(id)?;
    let abs = std::fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf());
    let shown: PathBuf = base
        .and_then(|b| std::fs::canonicalize(b).ok())
        .and_then(|b| abs.strip_prefix(&b).ok().map(Path::to_path_buf))
        .unwrap_or(abs);
    Some(escape(&shown.to_string_lossy()))
}

fn cell(
    out: &mut String,
    images: &ImageDir,
    id: &str,
    caption: &str,
    class: &str,
    base: Option<&Path>,
) {
    let _ = write!(out, "<figure class=\"{class}\">");
    match src(images, id, base) {
        Some(s) => {
            let _ = write!(out, "<img src=\"{s}\" alt=\"{}\">", escape(id));
        }
        None => out.push_str("<div class=\"missing\">no image</div>"),
    }
    let _ = write!(out, "<figcaption>{}</figcaption></figure>", escape(caption));
}

/// Render up to `limit` queries with their first `per_row` hits. Hits that
/// the ground truth marks relevant are outlined. Image paths are written
/// relative to `base` when they fall under it.
pub fn contact_sheet(
    rankings: &[RankingResult],
    images: &ImageDir,
    gt: Option<&GroundTruth>,
    limit: usize,
    per_row: usize,
    base: Option<&Path>,
) -> String {
    let mut out = String::from(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Retrieval results</title>\n<style>\
body{font-family:sans-serif;margin:1em}\
.row{display:flex;gap:6px;margin-bottom:14px;align-items:flex-start}\
figure{margin:0;width:110px;text-align:center;font-size:11px;word-break:break-all}\
img{width:104px;height:104px;object-fit:contain;border:3px solid #ddd;background:#fff}\
.query img{border-color:#333}.hit img{border-color:#2a2}\
.missing{width:104px;height:104px;background:#eee;line-height:104px}\
</style></head><body>\n",
    );
    for r in rankings.iter().take(limit) {
        let relevant = gt.and_then(|g| g.relevant(&r.query_id));
        out.push_str("<div class=\"row\">");
        cell(
            &mut out,
            images,
            &r.query_id,
            &format!("query {}", r.query_id),
            "query",
            base,
        );
        for (rank, h) in r.hits.iter().take(per_row).enumerate() {
            let class = if relevant.is_some_and(|rel| rel.contains(&h.id)) {
                "hit"
            } else {
                "miss"
            };
            let caption = format!("#{} {} ({:.3})", rank + 1, h.id, h.distance);
            cell(&mut out, images, &h.id, &caption, class, base);
        }
        out.push_str("</div>\n");
    }
    out.push_str("</body></html>\n");
    out
}
