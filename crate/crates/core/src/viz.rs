//! Static SVG maps and CSV tables for embeddings.

use std::fmt::Write as _;
use std::io::Cursor;
use std::path::Path;

use base64::Engine as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tsne::Embedding;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScatterSpec {
    pub point_radius: f64,
    pub width: f64,
    pub height: f64,
    pub margin: f64,
    /// Number of thumbnails; clamped to N.
    pub thumbnails: usize,
    pub thumbnail_side: f64,
    pub seed: u64,
}

impl Default for ScatterSpec {
    fn default() -> Self {
        Self {
            point_radius: 2.0,
            width: 800.0,
            height: 800.0,
            margin: 20.0,
            thumbnails: 500,
            thumbnail_side: 24.0,
            seed: 0,
        }
    }
}

/// Uniform scale plus translation from map to canvas coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CanvasTransform {
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
}

impl CanvasTransform {
    /// Fits the bounding box of `y` (`[N, 2]`) into the canvas, centred,
    /// with one scale for both axes.
    pub fn fit(y: &Tensor, spec: &ScatterSpec) -> Result<Self> {
        if y.ndim() != 2 || y.row_len() != 2 {
            return Err(Error::UnsupportedDimension(if y.ndim() == 2 { y.row_len() } else { y.ndim() }));
        }
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for i in 0..y.rows() {
            for k in 0..2 {
                lo[k] = lo[k].min(y.row(i)[k]);
                hi[k] = hi[k].max(y.row(i)[k]);
            }
        }
        if y.rows() == 0 {
            lo = [0.0; 2];
            hi = [0.0; 2];
        }
        let (aw, ah) = (spec.width - 2.0 * spec.margin, spec.height - 2.0 * spec.margin);
        let (rx, ry) = (hi[0] - lo[0], hi[1] - lo[1]);
        let scale = match (rx > 0.0, ry > 0.0) {
            (true, true) => (aw / rx).min(ah / ry),
            (true, false) => aw / rx,
            (false, true) => ah / ry,
            (false, false) => 1.0,
        };
        let cx = 0.5 * (lo[0] + hi[0]);
        let cy = 0.5 * (lo[1] + hi[1]);
        Ok(Self {
            scale,
            tx: 0.5 * spec.width - scale * cx,
            ty: 0.5 * spec.height - scale * cy,
        })
    }

    pub fn apply(&self, p: &[f64]) -> (f64, f64) {
        (self.scale * p[0] + self.tx, self.scale * p[1] + self.ty)
    }
}

/// Indices of the thumbnail examples, sorted.
pub fn thumbnail_indices(n: usize, spec: &ScatterSpec) -> Vec<usize> {
    let k = spec.thumbnails.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

/// Grayscale PNG of one `[H, W]` image, min-max scaled to 0..255.
pub fn png_thumbnail(pixels: &[f64], height: usize, width: usize) -> Result<Vec<u8>> {
    if pixels.len() != height * width {
        return Err(Error::dim("thumbnail pixels", height * width, pixels.len()));
    }
    let lo = pixels.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = pixels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = if hi > lo { hi - lo } else { 1.0 };
    let bytes: Vec<u8> = pixels.iter().map(|p| (255.0 * (p - lo) / range).round().clamp(0.0, 255.0) as u8).collect();
    let img = image::GrayImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| Error::State("thumbnail buffer size".into()))?;
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(out.into_inner())
}

/// SVG scatter map of a 2-D embedding. `images` is `[N, H, W]` or
/// `[N, H, W, 1]`; when given, seeded thumbnails are drawn at their points.
pub fn emit_scatter_svg(
    y: &Tensor,
    images: Option<&Tensor>,
    labels: Option<&[usize]>,
    spec: &ScatterSpec,
) -> Result<String> {
    let t = CanvasTransform::fit(y, spec)?;
    let n = y.rows();
    if let Some(l) = labels {
        if l.len() != n {
            return Err(Error::dim("scatter labels", n, l.len()));
        }
    }
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = spec.width,
        h = spec.height
    );
    let _ = writeln!(
        svg,
        r#"<metadata>canvas-transform: uniform-scale aspect-fit; scale={} tx={} ty={}; points={n}</metadata>"#,
        t.scale, t.tx, t.ty
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<g id="points">"#);
    for i in 0..n {
        let (x, yy) = t.apply(y.row(i));
        let colour = labels.map_or("#333333", |l| PALETTE[l[i] % PALETTE.len()]);
        let _ = writeln!(
            svg,
            r#"<circle class="point" data-index="{i}" cx="{x:.3}" cy="{yy:.3}" r="{}" fill="{colour}"/>"#,
            spec.point_radius
        );
    }
    svg.push_str("</g>\n");
    if let Some(images) = images {
        let (h, w) = match *images.shape() {
            [m, h, w] | [m, h, w, 1] if m == n => (h, w),
            ref s => return Err(Error::dim("scatter images", format!("[{n}, H, W]"), format!("{s:?}"))),
        };
        let side = spec.thumbnail_side;
        let _ = writeln!(svg, r#"<g id="thumbnails">"#);
        for i in thumbnail_indices(n, spec) {
            let (x, yy) = t.apply(y.row(i));
            let png = png_thumbnail(images.row(i), h, w)?;
            let _ = writeln!(
                svg,
                r#"<image class="thumbnail" data-index="{i}" x="{:.3}" y="{:.3}" width="{side}" height="{side}" href="data:image/png;base64,{}"/>"#,
                x - side / 2.0,
                yy - side / 2.0,
                base64::engine::general_purpose::STANDARD.encode(png)
            );
        }
        svg.push_str("</g>\n");
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Embedding coordinates and calibration values read back from CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub y: Tensor,
    pub alphas: Vec<f64>,
    pub perplexities: Vec<f64>,
    pub labels: Option<Vec<usize>>,
}

/// `index,y1..yv,alpha,perplexity[,label]`, one row per example.
pub fn emit_embedding_csv(embedding: &Embedding, labels: Option<&[usize]>) -> Result<String> {
    let (n, v) = (embedding.len(), embedding.dims());
    if embedding.alphas.len() != n || embedding.perplexities.len() != n {
        return Err(Error::dim("embedding calibration values", n, embedding.alphas.len()));
    }
    if let Some(l) = labels {
        if l.len() != n {
            return Err(Error::dim("embedding labels", n, l.len()));
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["index".to_string()];
    header.extend((1..=v).map(|k| format!("y{k}")));
    header.extend(["alpha".into(), "perplexity".into()]);
    if labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header)?;
    for i in 0..n {
        let mut rec = vec![i.to_string()];
        rec.extend(embedding.y.row(i).iter().map(|x| x.to_string()));
        rec.push(embedding.alphas[i].to_string());
        rec.push(embedding.perplexities[i].to_string());
        if let Some(l) = labels {
            rec.push(l[i].to_string());
        }
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::State(e.to_string()))
}

pub fn parse_embedding_csv(text: &str) -> Result<EmbeddingTable> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let v = header.iter().filter(|h| h.starts_with('y')).count();
    let has_label = header.last().is_some_and(|h| h == "label");
    let expected = 3 + v + usize::from(has_label);
    if v == 0 || header.len() != expected || header[0] != "index" {
        return Err(Error::Config(format!("unrecognised embedding header {header:?}")));
    }
    let bad = |row: usize, what: &str| Error::Config(format!("embedding row {row}: bad {what}"));
    let (mut coords, mut alphas, mut perps, mut labels) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let num = |k: usize| rec.get(k).and_then(|s| s.parse::<f64>().ok());
        for k in 1..=v {
            coords.push(num(k).ok_or_else(|| bad(row, "coordinate"))?);
        }
        alphas.push(num(v + 1).ok_or_else(|| bad(row, "alpha"))?);
        perps.push(num(v + 2).ok_or_else(|| bad(row, "perplexity"))?);
        if has_label {
            let l = rec.get(v + 3).and_then(|s| s.parse().ok()).ok_or_else(|| bad(row, "label"))?;
            labels.push(l);
        }
    }
    let n = alphas.len();
    Ok(EmbeddingTable {
        y: Tensor::new(vec![n, v], coords)?,
        alphas,
        perplexities: perps,
        labels: has_label.then_some(labels),
    })
}

pub fn write_embedding_csv(path: impl AsRef<Path>, embedding: &Embedding, labels: Option<&[usize]>) -> Result<()> {
    std::fs::write(path, emit_embedding_csv(embedding, labels)?)?;
    Ok(())
}

pub fn read_embedding_csv(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    parse_embedding_csv(&std::fs::read_to_string(path)?)
}

/// `iteration,kl` rows.
pub fn emit_kl_trace_csv(trace: &[(u64, f64)]) -> String {
    let mut out = String::from("iteration,kl\n");
    for (t, kl) in trace {
        let _ = writeln!(out, "{t},{kl}");
    }
    out
}

pub fn parse_kl_trace_csv(text: &str) -> Result<Vec<(u64, f64)>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn embedding(n: usize) -> Embedding {
        Embedding {
            y: Tensor::from_fn(&[n, 2], |i| (i as f64 * 0.37).sin() * 3.0 + 1.0 / 3.0),
            kl_trace: vec![(0, 1.5), (50, 0.25)],
            alphas: (0..n).map(|i| 0.1 * (i + 1) as f64).collect(),
            perplexities: vec![2.0; n],
        }
    }

    #[test]
    fn ten_points_ten_circles() {
        let svg = emit_scatter_svg(&embedding(10).y, None, None, &ScatterSpec::default()).unwrap();
        assert_eq!(svg.matches("<circle").count(), 10);
        assert_eq!(svg.matches("<image").count(), 0);
    }

    #[test]
    fn every_example_gets_a_thumbnail_when_k_is_n() {
        let e = embedding(6);
        let images = Tensor::from_fn(&[6, 4, 4], |i| (i % 7) as f64);
        let spec = ScatterSpec {
            thumbnails: 6,
            ..ScatterSpec::default()
        };
        let svg = emit_scatter_svg(&e.y, Some(&images), None, &spec).unwrap();
        assert_eq!(svg.matches("<image").count(), 6);
    }

    #[test]
    fn thumbnail_selection_is_seeded() {
        let spec = ScatterSpec {
            thumbnails: 5,
            seed: 9,
            ..ScatterSpec::default()
        };
        assert_eq!(thumbnail_indices(40, &spec), thumbnail_indices(40, &spec));
        assert_eq!(thumbnail_indices(3, &spec), vec![0, 1, 2]);
    }

    #[test]
    fn three_d_rejected() {
        let y = Tensor::zeros(&[4, 3]);
        assert!(matches!(
            emit_scatter_svg(&y, None, None, &ScatterSpec::default()),
            Err(Error::UnsupportedDimension(3))
        ));
    }

    #[test]
    fn transform_keeps_aspect() {
        let y = Tensor::new(vec![3, 2], vec![0.0, 0.0, 2.0, 0.0, 0.0, 1.0]).unwrap();
        let spec = ScatterSpec::default();
        let t = CanvasTransform::fit(&y, &spec).unwrap();
        let (a, b, c) = (t.apply(y.row(0)), t.apply(y.row(1)), t.apply(y.row(2)));
        assert!(((b.0 - a.0) - 2.0 * (c.1 - a.1)).abs() < 1e-9);
        assert!((b.0 - a.0 - 760.0).abs() < 1e-9);
    }

    #[test]
    fn csv_shape_and_round_trip() {
        let e = embedding(3);
        let text = emit_embedding_csv(&e, None).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(text.lines().next().unwrap(), "index,y1,y2,alpha,perplexity");
        let t = parse_embedding_csv(&text).unwrap();
        assert_eq!(t.y, e.y);
        assert_eq!(t.alphas, e.alphas);
        assert!(t.labels.is_none());

        let labelled = emit_embedding_csv(&e, Some(&[0, 1, 1])).unwrap();
        assert!(labelled.lines().next().unwrap().ends_with(",label"));
        assert_eq!(parse_embedding_csv(&labelled).unwrap().labels, Some(vec![0, 1, 1]));
    }

    #[test]
    fn kl_trace_round_trip() {
        let trace = vec![(0, 1.0 / 3.0), (50, 0.125)];
        assert_eq!(parse_kl_trace_csv(&emit_kl_trace_csv(&trace)).unwrap(), trace);
    }

    #[test]
    fn thumbnail_is_png() {
        let png = png_thumbnail(&[0.0, 0.5, 1.0, 0.25], 2, 2).unwrap();
        assert_eq!(&png[1..4], b"PNG");
    }
}
