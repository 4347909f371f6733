//! Qualitative exports: density-matrix heatmaps and top-k position
//! highlights over review documents.
//!
//! Both exporters are pure formatters over data the model already computed:
//! deterministic byte-for-byte given identical inputs, no external assets,
//! no timestamps. Each writes two sibling files derived from one path stem —
//! a machine-readable form (CSV, plain text) next to a viewable one
//! (SVG, HTML).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::corpus::{Document, Vocabulary, DELIM_ID, PAD_ID};
use crate::density::{DensityMatrix, PositionDistribution};
use crate::error::{Error, Result};
use crate::numerics::Tape;

/// Highlight budget used by the paper's figure protocol.
pub const DEFAULT_HIGHLIGHT_K: usize = 20;

/// Pixel edge length of one heatmap cell in the SVG rendering.
const CELL_PX: usize = 10;

/// A density matrix prepared for rendering: raw values plus the color
/// scale's actual data bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapExport {
    pub owner_id: String,
    /// Side length; the rendered grid is exactly `n` x `n`.
    pub n: usize,
    /// Row-major `n * n` values.
    pub values: Vec<f64>,
    /// Smallest value in `values` — the light end of the scale.
    pub min: f64,
    /// Largest value in `values` — the dark end of the scale.
    pub max: f64,
}

impl HeatmapExport {
    /// Snapshot a density matrix for export. The matrix must be finite.
    pub fn from_density(rho: &DensityMatrix) -> Result<HeatmapExport> {
        let n = rho.n();
        let values = rho.values.to_vec();
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "heatmap export: density matrix for {} contains {}",
                rho.owner_id, bad
            )));
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(HeatmapExport { owner_id: rho.owner_id.clone(), n, values, min, max })
    }

    /// Plain CSV: `n` rows of `n` comma-separated values, no header.
    ///
    /// Values print in Rust's shortest round-trip notation, so parsing the
    /// CSV back recovers the matrix exactly.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in 0..self.n {
            for col in 0..self.n {
                if col > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{}", self.values[row * self.n + col]);
            }
            out.push('\n');
        }
        out
    }

    /// Normalized position of a value on the color scale, 0 = lightest,
    /// 1 = darkest. A constant matrix maps everywhere to mid-scale.
    fn intensity(&self, v: f64) -> f64 {
        if self.max > self.min {
            (v - self.min) / (self.max - self.min)
        } else {
            0.5
        }
    }

    /// SVG grid with one `rect` per cell; darker cells mean larger values.
    pub fn to_svg(&self) -> String {
        let side = self.n * CELL_PX;
        let mut out = String::new();
        let _ = write!(
            out,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{side}\" height=\"{side}\" \
             viewBox=\"0 0 {side} {side}\">\n"
        );
        let _ = write!(out, "  <title>density matrix {}</title>\n", escape_xml(&self.owner_id));
        for row in 0..self.n {
            for col in 0..self.n {
                let t = self.intensity(self.values[row * self.n + col]);
                // Grayscale ramp from 240 (light, smallest) to 20 (dark,
                // largest); rounding keeps the mapping monotone.
                let shade = (240.0 - t * 220.0).round() as u8;
                let _ = write!(
                    out,
                    "  <rect x=\"{}\" y=\"{}\" width=\"{CELL_PX}\" height=\"{CELL_PX}\" \
                     fill=\"rgb({shade},{shade},{shade})\"/>\n",
                    col * CELL_PX,
                    row * CELL_PX,
                );
            }
        }
        out.push_str("</svg>\n");
        out
    }
}

/// Parse a heatmap CSV back into row-major values. The inverse of
/// [`HeatmapExport::to_csv`], used by round-trip checks.
pub fn parse_heatmap_csv(csv: &str) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (i, line) in csv.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for field in line.split(',') {
            row.push(field.trim().parse::<f64>().map_err(|e| {
                Error::Format(format!("heatmap csv line {}: {} ({})", i + 1, e, field))
            })?);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Empty("heatmap csv: no rows".into()));
    }
    Ok(rows)
}

/// Write `<stem>.csv` and `<stem>.svg` for a density matrix and return the
/// export that produced them.
pub fn export_density_heatmap(rho: &DensityMatrix, stem: &Path) -> Result<HeatmapExport> {
    let export = HeatmapExport::from_density(rho)?;
    std::fs::write(stem.with_extension("csv"), export.to_csv())?;
    std::fs::write(stem.with_extension("svg"), export.to_svg())?;
    Ok(export)
}

/// One highlighted position.
#[derive(Debug, Clone, PartialEq)]
pub struct Highlight {
    /// Position in the document, 0-based.
    pub position: usize,
    pub token: String,
    /// The position's attention weight.
    pub p: f64,
    /// 1-based rank; rank 1 is the largest `p`.
    pub rank: usize,
}

/// A document with its top-k attention highlights.
#[derive(Debug, Clone, PartialEq)]
pub struct HighlightExport {
    pub owner_id: String,
    /// Every position's token text, PAD and DELIM included.
    pub tokens: Vec<String>,
    /// Exactly `min(k, highlightable positions)` entries, sorted by
    /// descending `p`; ties broken toward the earlier position.
    pub highlights: Vec<Highlight>,
    /// The requested budget.
    pub k: usize,
}

impl HighlightExport {
    /// Rank the document's positions by attention weight.
    ///
    /// PAD and DELIM positions never qualify, whatever their weight: they
    /// carry no user-visible text. `k` must be positive; the distribution
    /// must cover the document exactly.
    pub fn from_distribution(
        doc: &Document,
        vocab: &Vocabulary,
        dist: &PositionDistribution,
        k: usize,
    ) -> Result<HighlightExport> {
        if k == 0 {
            return Err(Error::Config("position highlights: k must be positive".into()));
        }
        if dist.len() != doc.len() {
            return Err(Error::Dim(format!(
                "position highlights: distribution over {} positions vs document of {}",
                dist.len(),
                doc.len()
            )));
        }
        let mut tape = Tape::new();
        let p = dist.probabilities(&mut tape)?.to_vec();
        if let Some(bad) = p.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "position highlights: weight {} for {}",
                bad, dist.owner_id
            )));
        }

        let tokens: Vec<String> = doc
            .token_ids
            .iter()
            .map(|&id| vocab.token(id).unwrap_or("<unk>").to_string())
            .collect();

        let mut eligible: Vec<usize> = (0..doc.len())
            .filter(|&i| doc.token_ids[i] != PAD_ID && doc.token_ids[i] != DELIM_ID)
            .collect();
        // Descending weight; equal weights keep document order.
        eligible.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
        eligible.truncate(k);

        let highlights = eligible
            .iter()
            .enumerate()
            .map(|(rank, &position)| Highlight {
                position,
                token: tokens[position].clone(),
                p: p[position],
                rank: rank + 1,
            })
            .collect();
        Ok(HighlightExport { owner_id: dist.owner_id.clone(), tokens, highlights, k })
    }

    fn highlight_at(&self, position: usize) -> Option<&Highlight> {
        self.highlights.iter().find(|h| h.position == position)
    }

    /// Largest highlighted weight, the reference for the intensity ramp.
    fn p_ceiling(&self) -> f64 {
        self.highlights.first().map(|h| h.p).unwrap_or(0.0)
    }

    /// Inline-styled HTML: one span per token, highlighted spans carrying a
    /// single intensity ramp proportional to their weight.
    pub fn to_html(&self) -> String {
        let ceiling = self.p_ceiling();
        let mut out = String::new();
        let _ = write!(
            out,
            "<!-- position attention for {} -->\n<p style=\"font-family: monospace; \
             line-height: 1.8;\">\n",
            escape_xml(&self.owner_id)
        );
        for (i, token) in self.tokens.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            match self.highlight_at(i) {
                Some(h) => {
                    let strength = if ceiling > 0.0 { h.p / ceiling } else { 1.0 };
                    let alpha = 0.25 + 0.70 * strength;
                    let _ = write!(
                        out,
                        "<span style=\"background: rgba(255,196,0,{:.3});\" \
                         title=\"rank {} p={:.6}\">{}</span>",
                        alpha,
                        h.rank,
                        h.p,
                        escape_xml(token)
                    );
                }
                None => {
                    let _ = write!(out, "{}", escape_xml(token));
                }
            }
        }
        out.push_str("\n</p>\n");
        out
    }

    /// Plain-text fallback: highlighted tokens wear brackets.
    pub fn to_text(&self) -> String {
        let mut parts = Vec::with_capacity(self.tokens.len());
        for (i, token) in self.tokens.iter().enumerate() {
            if self.highlight_at(i).is_some() {
                parts.push(format!("[{}]", token));
            } else {
                parts.push(token.clone());
            }
        }
        let mut out = parts.join(" ");
        out.push('\n');
        out
    }
}

/// Write `<stem>.html` and `<stem>.txt` for a document's attention
/// highlights and return the export that produced them.
pub fn export_position_highlights(
    doc: &Document,
    vocab: &Vocabulary,
    dist: &PositionDistribution,
    k: usize,
    stem: &Path,
) -> Result<HighlightExport> {
    let export = HighlightExport::from_distribution(doc, vocab, dist, k)?;
    std::fs::write(stem.with_extension("html"), export.to_html())?;
    std::fs::write(stem.with_extension("txt"), export.to_text())?;
    Ok(export)
}

/// The two artifact pairs a heatmap/highlight export writes, for callers
/// that want to report file names.
pub fn heatmap_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("csv"), stem.with_extension("svg"))
}

fn escape_xml(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_vocab;
    use crate::density::DistMode;
    use crate::numerics::Tensor;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn density_from(values: Vec<f64>, n: usize, owner: &str) -> DensityMatrix {
        DensityMatrix {
            values: Tensor::from_vec(&[n, n], values).unwrap(),
            owner_id: owner.to_string(),
        }
    }

    fn doc_with_ids(owner: &str, token_ids: Vec<usize>) -> Document {
        let mask = token_ids.iter().map(|&id| id != PAD_ID).collect();
        Document {
            owner_id: owner.to_string(),
            n_reviews: 1,
            empty: token_ids.iter().all(|&id| id == PAD_ID),
            token_ids,
            mask,
        }
    }

    #[test]
    fn csv_round_trips_exactly() {
        let n = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let values: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let rho = density_from(values.clone(), n, "u0");
        let export = HeatmapExport::from_density(&rho).unwrap();
        let parsed = parse_heatmap_csv(&export.to_csv()).unwrap();
        assert_eq!(parsed.len(), n);
        for (row_idx, row) in parsed.iter().enumerate() {
            assert_eq!(row.len(), n);
            for (col_idx, &v) in row.iter().enumerate() {
                // Shortest round-trip printing recovers the exact bits, a
                // stronger guarantee than the 1e-9 the contract asks for.
                assert_eq!(v.to_bits(), values[row_idx * n + col_idx].to_bits());
            }
        }
    }

    #[test]
    fn scale_bounds_are_the_data_extremes() {
        let rho = density_from(vec![0.25, -0.5, 0.125, 0.75], 2, "u1");
        let export = HeatmapExport::from_density(&rho).unwrap();
        assert_eq!(export.min, -0.5);
        assert_eq!(export.max, 0.75);
        assert_eq!(export.n, 2);
        assert_eq!(export.values.len(), 4);
    }

    #[test]
    fn diag_one_zero_renders_one_darkest_cell() {
        let rho = density_from(vec![1.0, 0.0, 0.0, 0.0], 2, "u2");
        let export = HeatmapExport::from_density(&rho).unwrap();
        let svg = export.to_svg();
        // The (0,0) cell sits at the dark end; the three zero cells at the
        // light end.
        assert_eq!(svg.matches("fill=\"rgb(20,20,20)\"").count(), 1);
        assert_eq!(svg.matches("fill=\"rgb(240,240,240)\"").count(), 3);
        // And the darkest rect is the first one (x=0, y=0).
        let first_rect = svg.lines().find(|l| l.contains("<rect")).unwrap();
        assert!(first_rect.contains("x=\"0\" y=\"0\""));
        assert!(first_rect.contains("rgb(20,20,20)"));
    }

    #[test]
    fn fifty_by_fifty_grid_has_2500_cells() {
        let n = 50;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let values: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let export = HeatmapExport::from_density(&density_from(values, n, "u3")).unwrap();
        let svg = export.to_svg();
        assert_eq!(svg.matches("<rect").count(), 2500);
        assert!(svg.contains("width=\"500\" height=\"500\""));
        let csv = export.to_csv();
        assert_eq!(csv.lines().count(), 50);
        assert!(csv.lines().all(|l| l.split(',').count() == 50));
    }

    #[test]
    fn constant_matrix_renders_mid_scale() {
        let rho = density_from(vec![0.5; 9], 3, "u4");
        let export = HeatmapExport::from_density(&rho).unwrap();
        let svg = export.to_svg();
        // t = 0.5 everywhere: shade 240 - 110 = 130.
        assert_eq!(svg.matches("fill=\"rgb(130,130,130)\"").count(), 9);
    }

    #[test]
    fn non_finite_density_is_rejected() {
        let rho = density_from(vec![0.0, f64::NAN, 0.0, 0.0], 2, "u5");
        assert!(matches!(HeatmapExport::from_density(&rho), Err(Error::NonFinite(_))));
    }

    #[test]
    fn heatmap_files_land_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("rho_u0");
        let rho = density_from(vec![0.6, 0.1, 0.1, 0.2], 2, "u0");
        let export = export_density_heatmap(&rho, &stem).unwrap();
        let (csv_path, svg_path) = heatmap_paths(&stem);
        let csv = std::fs::read_to_string(csv_path).unwrap();
        assert_eq!(csv, export.to_csv());
        let svg = std::fs::read_to_string(svg_path).unwrap();
        assert!(svg.starts_with("<svg"));
        let parsed = parse_heatmap_csv(&csv).unwrap();
        assert_eq!(parsed[0][0], 0.6);
        assert_eq!(parsed[1][1], 0.2);
    }

    /// A small vocabulary with deterministic word ids for highlight tests.
    fn highlight_fixture() -> (Vocabulary, Document) {
        let records = vec![crate::corpus::ReviewRecord {
            user_id: "u0".into(),
            item_id: "i0".into(),
            rating: 5.0,
            text: "alpha beta gamma delta".into(),
            review_id: "r0".into(),
        }];
        let vocab = build_vocab(&records, 1);
        let a = vocab.id("alpha");
        let b = vocab.id("beta");
        let g = vocab.id("gamma");
        let d = vocab.id("delta");
        // Layout: PAD, alpha, beta, DELIM, gamma, delta, PAD, DELIM.
        let doc = doc_with_ids("u0", vec![PAD_ID, a, b, DELIM_ID, g, d, PAD_ID, DELIM_ID]);
        (vocab, doc)
    }

    #[test]
    fn uniform_weights_take_first_nonpad_positions() {
        let (vocab, doc) = highlight_fixture();
        let dist = PositionDistribution::new("u0", doc.len(), DistMode::Softmax).unwrap();
        let export = HighlightExport::from_distribution(&doc, &vocab, &dist, 3).unwrap();
        // Uniform p, ties broken by earlier position, PAD/DELIM skipped:
        // positions 1, 2, 4.
        let positions: Vec<usize> = export.highlights.iter().map(|h| h.position).collect();
        assert_eq!(positions, vec![1, 2, 4]);
        assert_eq!(export.highlights[0].token, "alpha");
        assert_eq!(export.highlights[0].rank, 1);
        assert_eq!(export.highlights[2].token, "gamma");
    }

    #[test]
    fn concentrated_weight_is_rank_one() {
        let (vocab, doc) = highlight_fixture();
        let mut logits = vec![0.0; doc.len()];
        logits[5] = 30.0; // delta gets essentially all the mass
        let dist = PositionDistribution::from_logits(
            "u0",
            Tensor::param(&[logits.len()], logits.clone()).unwrap(),
            DistMode::Softmax,
        );
        let export = HighlightExport::from_distribution(&doc, &vocab, &dist, 1).unwrap();
        assert_eq!(export.highlights.len(), 1);
        assert_eq!(export.highlights[0].position, 5);
        assert_eq!(export.highlights[0].token, "delta");
        assert_eq!(export.highlights[0].rank, 1);
        assert!(export.highlights[0].p > 0.99);
    }

    #[test]
    fn pad_and_delim_never_highlight_even_with_large_weight() {
        let (vocab, doc) = highlight_fixture();
        let mut logits = vec![0.0; doc.len()];
        logits[0] = 30.0; // PAD position
        logits[3] = 25.0; // DELIM position
        let dist = PositionDistribution::from_logits(
            "u0",
            Tensor::param(&[logits.len()], logits.clone()).unwrap(),
            DistMode::Softmax,
        );
        let export = HighlightExport::from_distribution(&doc, &vocab, &dist, 8).unwrap();
        // Only the four word positions are eligible, whatever their mass.
        assert_eq!(export.highlights.len(), 4);
        assert!(export.highlights.iter().all(|h| ![0, 3, 6, 7].contains(&h.position)));
    }

    #[test]
    fn budget_caps_and_shortfall_shrinks() {
        let (vocab, doc) = highlight_fixture();
        let dist = PositionDistribution::new("u0", doc.len(), DistMode::Softmax).unwrap();
        // Four eligible positions; ask for twenty, get four.
        let export =
            HighlightExport::from_distribution(&doc, &vocab, &dist, DEFAULT_HIGHLIGHT_K).unwrap();
        assert_eq!(export.highlights.len(), 4);
        // Ask for two, get exactly two.
        let export = HighlightExport::from_distribution(&doc, &vocab, &dist, 2).unwrap();
        assert_eq!(export.highlights.len(), 2);
    }

    #[test]
    fn highlights_match_brute_force_top_k() {
        let (vocab, doc) = highlight_fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..25 {
            let logits: Vec<f64> = (0..doc.len()).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let dist = PositionDistribution::from_logits(
                "u0",
                Tensor::param(&[logits.len()], logits.clone()).unwrap(),
                DistMode::Softmax,
            );
            let k = rng.gen_range(1..=6);
            let export = HighlightExport::from_distribution(&doc, &vocab, &dist, k).unwrap();

            // Brute force: repeatedly extract the max-p eligible position.
            let mut tape = Tape::new();
            let p = dist.probabilities(&mut tape).unwrap().to_vec();
            let mut remaining: Vec<usize> = (0..doc.len())
                .filter(|&i| doc.token_ids[i] != PAD_ID && doc.token_ids[i] != DELIM_ID)
                .collect();
            let mut expect = Vec::new();
            while expect.len() < k && !remaining.is_empty() {
                let best = *remaining
                    .iter()
                    .min_by(|&&a, &&b| p[b].total_cmp(&p[a]).then(a.cmp(&b)))
                    .unwrap();
                remaining.retain(|&i| i != best);
                expect.push(best);
            }
            let got: Vec<usize> = export.highlights.iter().map(|h| h.position).collect();
            assert_eq!(got, expect);
            // Sorted by descending weight.
            for pair in export.highlights.windows(2) {
                assert!(pair[0].p >= pair[1].p);
            }
        }
    }

    #[test]
    fn zero_k_and_length_mismatch_are_rejected() {
        let (vocab, doc) = highlight_fixture();
        let dist = PositionDistribution::new("u0", doc.len(), DistMode::Softmax).unwrap();
        assert!(matches!(
            HighlightExport::from_distribution(&doc, &vocab, &dist, 0),
            Err(Error::Config(_))
        ));
        let short = PositionDistribution::new("u0", doc.len() - 1, DistMode::Softmax).unwrap();
        assert!(matches!(
            HighlightExport::from_distribution(&doc, &vocab, &short, 3),
            Err(Error::Dim(_))
        ));
    }

    #[test]
    fn renderings_are_deterministic_and_marked_up() {
        let (vocab, doc) = highlight_fixture();
        let mut logits = vec![0.0; doc.len()];
        logits[4] = 2.0;
        logits[1] = 1.0;
        let dist = PositionDistribution::from_logits(
            "u0",
            Tensor::param(&[logits.len()], logits.clone()).unwrap(),
            DistMode::Softmax,
        );
        let export = HighlightExport::from_distribution(&doc, &vocab, &dist, 2).unwrap();
        assert_eq!(export.to_html(), export.to_html());
        assert_eq!(export.to_text(), export.to_text());

        let text = export.to_text();
        assert!(text.contains("[gamma]"));
        assert!(text.contains("[alpha]"));
        assert!(!text.contains("[beta]"));

        let html = export.to_html();
        assert_eq!(html.matches("<span").count(), 2);
        assert!(html.contains("rank 1"));
        // The top-ranked span carries the strongest ramp value.
        assert!(html.contains("rgba(255,196,0,0.950)"));
    }

    #[test]
    fn highlight_files_land_on_disk() {
        let (vocab, doc) = highlight_fixture();
        let dist = PositionDistribution::new("u0", doc.len(), DistMode::Softmax).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("attention_u0");
        let export = export_position_highlights(&doc, &vocab, &dist, 3, &stem).unwrap();
        let html = std::fs::read_to_string(stem.with_extension("html")).unwrap();
        let txt = std::fs::read_to_string(stem.with_extension("txt")).unwrap();
        assert_eq!(html, export.to_html());
        assert_eq!(txt, export.to_text());
    }
}
