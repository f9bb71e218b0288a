//! Figures: exact t-SNE scatter plots, sample galleries, and loss curves.
//!
//! Every figure is a PNG next to a CSV holding the plotted numbers, so plot
//! data can be compared without decoding images.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// t-SNE

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TsneConfig {
    #[serde(default = "default_perplexity")]
    pub perplexity: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// Fixed step size; `None` uses `max(N / exaggeration / 4, 50)`.
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default = "default_exaggeration")]
    pub early_exaggeration: f64,
    #[serde(default = "default_exaggeration_iters")]
    pub exaggeration_iters: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_perplexity() -> f64 {
    30.0
}
fn default_iterations() -> usize {
    1000
}
fn default_exaggeration() -> f64 {
    12.0
}
fn default_exaggeration_iters() -> usize {
    250
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: default_perplexity(),
            iterations: default_iterations(),
            learning_rate: None,
            early_exaggeration: default_exaggeration(),
            exaggeration_iters: default_exaggeration_iters(),
            seed: 0,
        }
    }
}

fn squared_distances(x: &[Vec<f64>]) -> Vec<f64> {
    let n = x.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Row-conditional affinities with each row's bandwidth tuned to `perplexity`.
fn conditional_affinities(d: &[f64], n: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let row = &d[i * n..(i + 1) * n];
        let (mut beta, mut lo, mut hi) = (1.0, 0.0, f64::INFINITY);
        let min_d = (0..n).filter(|&j| j != i).map(|j| row[j]).fold(f64::INFINITY, f64::min);
        for _ in 0..100 {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in (0..n).filter(|&j| j != i) {
                let w = (-(row[j] - min_d) * beta).exp();
                p[i * n + j] = w;
                sum += w;
                weighted += w * (row[j] - min_d);
            }
            let entropy = sum.ln() + beta * weighted / sum;
            for j in (0..n).filter(|&j| j != i) {
                p[i * n + j] /= sum;
            }
            let diff = entropy - target;
            if diff.abs() < 1e-5 {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
    }
    p
}

/// Exact t-SNE of the rows of `x` (`[N, ...]`) into two dimensions.
pub fn tsne(x: &Tensor, cfg: &TsneConfig) -> Result<Vec<[f64; 2]>> {
    let n = x.batch();
    if n < 2 {
        return Err(Error::Data(format!("t-SNE needs at least 2 points, got {n}")));
    }
    let learning_rate = cfg.learning_rate.unwrap_or((n as f64 / cfg.early_exaggeration / 4.0).max(50.0));
    if !(cfg.perplexity > 0.0 && learning_rate > 0.0) {
        return Err(Error::Config("perplexity and learning_rate must be positive".into()));
    }
    if x.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("t-SNE input is not finite".into()));
    }
    let rows: Vec<Vec<f64>> = (0..n).map(|i| x.row(i).to_vec()).collect();
    let d = squared_distances(&rows);
    let perplexity = cfg.perplexity.min((n - 1) as f64 / 3.0).max(1.0);
    let cond = conditional_affinities(&d, n, perplexity);
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(1e-12);
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1e-4).expect("valid std");
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)]).collect();
    let mut velocity = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0; 2]; n];
    let mut num = vec![0.0; n * n];
    for it in 0..cfg.iterations {
        let exaggeration = if it < cfg.exaggeration_iters { cfg.early_exaggeration } else { 1.0 };
        let momentum = if it < cfg.exaggeration_iters { 0.5 } else { 0.8 };
        let mut z = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let q = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i * n + j] = q;
                num[j * n + i] = q;
                z += 2.0 * q;
            }
        }
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in (0..n).filter(|&j| j != i) {
                let q = num[i * n + j];
                let coeff = 4.0 * (exaggeration * p[i * n + j] - q / z) * q;
                g[0] += coeff * (y[i][0] - y[j][0]);
                g[1] += coeff * (y[i][1] - y[j][1]);
            }
            for k in 0..2 {
                gains[i][k] = if (g[k] > 0.0) != (velocity[i][k] > 0.0) {
                    gains[i][k] + 0.2
                } else {
                    (gains[i][k] * 0.8f64).max(0.01)
                };
                velocity[i][k] = momentum * velocity[i][k] - learning_rate * gains[i][k] * g[k];
            }
        }
        for i in 0..n {
            y[i][0] += velocity[i][0];
            y[i][1] += velocity[i][1];
        }
        let mean = [y.iter().map(|v| v[0]).sum::<f64>() / n as f64, y.iter().map(|v| v[1]).sum::<f64>() / n as f64];
        for v in y.iter_mut() {
            v[0] -= mean[0];
            v[1] -= mean[1];
        }
    }
    if y.iter().any(|v| !v[0].is_finite() || !v[1].is_finite()) {
        return Err(Error::Numeric("t-SNE diverged".into()));
    }
    Ok(y)
}

/// A labelled 2-D embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub points: Vec<[f64; 2]>,
    pub groups: Vec<usize>,
}

/// Mean distance between group centroids over the RMS spread of all points about their mean.
pub fn centroid_separation(points: &[[f64; 2]], groups: &[usize]) -> Result<f64> {
    if points.len() != groups.len() || points.is_empty() {
        return Err(Error::Data("one group per point is required".into()));
    }
    let mut ids: Vec<usize> = groups.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::Data("centroid separation needs two groups".into()));
    }
    let centroid = |sel: &dyn Fn(usize) -> bool| {
        let (mut c, mut k) = ([0.0; 2], 0.0);
        for (_, p) in points.iter().enumerate().filter(|(i, _)| sel(*i)) {
            c[0] += p[0];
            c[1] += p[1];
            k += 1.0;
        }
        [c[0] / k, c[1] / k]
    };
    let all = centroid(&|_| true);
    let spread = (points.iter().map(|p| (p[0] - all[0]).powi(2) + (p[1] - all[1]).powi(2)).sum::<f64>() / points.len() as f64).sqrt();
    let cs: Vec<[f64; 2]> = ids.iter().map(|&g| centroid(&|i| groups[i] == g)).collect();
    let mut total = 0.0;
    let mut pairs = 0.0;
    for a in 0..cs.len() {
        for b in a + 1..cs.len() {
            total += ((cs[a][0] - cs[b][0]).powi(2) + (cs[a][1] - cs[b][1]).powi(2)).sqrt();
            pairs += 1.0;
        }
    }
    if spread == 0.0 {
        return Ok(0.0);
    }
    Ok(total / pairs / spread)
}

fn csv_path(path: &Path) -> PathBuf {
    path.with_extension("csv")
}

/// Embed every client's batch jointly, then write a scatter PNG at `path`
/// and its plot data (`stage,client,x,y`) next to it as CSV.
pub fn emit_tsne(sets: &[(usize, Tensor)], stage_tag: &str, path: &Path, cfg: &TsneConfig) -> Result<Embedding> {
    if sets.len() < 2 {
        return Err(Error::Data(format!("t-SNE plots need at least 2 clients, got {}", sets.len())));
    }
    let flat: Vec<Tensor> = sets
        .iter()
        .map(|(_, t)| {
            let b = t.batch();
            t.clone().reshape(&[b, t.item_len()])
        })
        .collect::<Result<_>>()?;
    let x = Tensor::stack_rows(&flat.iter().collect::<Vec<_>>())?;
    let groups: Vec<usize> = sets.iter().flat_map(|(id, t)| std::iter::repeat_n(*id, t.batch())).collect();
    let points = tsne(&x, cfg)?;
    let mut csv = String::from("stage,client,x,y\n");
    for (p, g) in points.iter().zip(&groups) {
        writeln!(csv, "{stage_tag},{g},{:.9e},{:.9e}", p[0], p[1]).expect("string write");
    }
    write_file(&csv_path(path), csv.as_bytes())?;
    let mut canvas = Canvas::new(480, 480);
    let (lo, hi) = bounds(points.iter().copied());
    for (p, &g) in points.iter().zip(&groups) {
        let (px, py) = canvas.project(p, lo, hi);
        canvas.disc(px, py, 3, PALETTE[g % PALETTE.len()]);
    }
    for (k, (id, _)) in sets.iter().enumerate() {
        canvas.rect(8 + 14 * k, 8, 10, 10, PALETTE[id % PALETTE.len()]);
    }
    canvas.save(path)?;
    Ok(Embedding { points, groups })
}

// ---------------------------------------------------------------------------
// Gallery

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GalleryLayout {
    pub rows: usize,
    pub cols: usize,
    pub tile: [usize; 2],
    pub width: usize,
    pub height: usize,
}

const PAD: usize = 2;

/// `[-1, 1]` features to `[0, 1]` display values.
pub fn feature_to_unit(v: f64) -> f64 {
    ((v + 1.0) / 2.0).clamp(0.0, 1.0)
}

/// Grid of `n` rows by 3 columns: original, synthetic features, decoded reconstruction.
pub fn emit_gallery(original: &Tensor, synthetic_features: &Tensor, decoded: &Tensor, path: &Path) -> Result<GalleryLayout> {
    let n = original.batch();
    if synthetic_features.batch() != n || decoded.batch() != n {
        return Err(Error::Data(format!(
            "gallery columns differ in length: {n}, {}, {}",
            synthetic_features.batch(),
            decoded.batch()
        )));
    }
    if n == 0 {
        return Err(Error::Data("gallery needs at least one row".into()));
    }
    let shape = original.item_shape().to_vec();
    if shape.len() != 3 || synthetic_features.item_shape() != shape.as_slice() || decoded.item_shape() != shape.as_slice() {
        return Err(Error::Shape("gallery columns must share one [C, H, W] shape".into()));
    }
    let (h, w) = (shape[1], shape[2]);
    let layout = GalleryLayout {
        rows: n,
        cols: 3,
        tile: [h, w],
        width: 3 * w + 4 * PAD,
        height: n * h + (n + 1) * PAD,
    };
    let mut canvas = Canvas::filled(layout.width, layout.height, [96, 96, 96]);
    let columns: [(&Tensor, fn(f64) -> f64); 3] = [
        (original, |v| v.clamp(0.0, 1.0)),
        (synthetic_features, feature_to_unit),
        (decoded, |v| v.clamp(0.0, 1.0)),
    ];
    for r in 0..n {
        for (c, (t, map)) in columns.iter().enumerate() {
            canvas.tile(PAD + c * (w + PAD), PAD + r * (h + PAD), t.row(r), [shape[0], h, w], *map);
        }
    }
    canvas.save(path)?;
    Ok(layout)
}

// ---------------------------------------------------------------------------
// Loss curves

/// Polyline plot of each named series and a `series,step,value` CSV.
pub fn emit_loss_curves(series: &[(String, Vec<f64>)], path: &Path) -> Result<()> {
    if series.iter().all(|(_, v)| v.is_empty()) {
        return Err(Error::Data("no loss values to plot".into()));
    }
    let mut csv = String::from("series,step,value\n");
    for (name, values) in series {
        for (i, v) in values.iter().enumerate() {
            writeln!(csv, "{name},{i},{v:.9e}").expect("string write");
        }
    }
    write_file(&csv_path(path), csv.as_bytes())?;
    let finite = series.iter().flat_map(|(_, v)| v.iter().enumerate().map(|(i, &y)| [i as f64, y])).filter(|p| p[1].is_finite());
    let (lo, hi) = bounds(finite);
    let mut canvas = Canvas::new(640, 400);
    for (k, (_, values)) in series.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let pts: Vec<(i64, i64)> = values
            .iter()
            .enumerate()
            .filter(|(_, y)| y.is_finite())
            .map(|(i, &y)| canvas.project(&[i as f64, y], lo, hi))
            .collect();
        for pair in pts.windows(2) {
            canvas.line(pair[0], pair[1], colour);
        }
        if let [only] = pts.as_slice() {
            canvas.disc(only.0, only.1, 2, colour);
        }
        canvas.rect(8 + 14 * k, 8, 10, 10, colour);
    }
    canvas.save(path)
}

// ---------------------------------------------------------------------------
// Raster helpers

const PALETTE: [[u8; 3]; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];

fn bounds(points: impl Iterator<Item = [f64; 2]>) -> ([f64; 2], [f64; 2]) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in points {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    for k in 0..2 {
        if !lo[k].is_finite() {
            lo[k] = 0.0;
            hi[k] = 1.0;
        }
        if hi[k] - lo[k] < 1e-12 {
            lo[k] -= 0.5;
            hi[k] += 0.5;
        }
    }
    (lo, hi)
}

struct Canvas {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Canvas {
    fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [255, 255, 255])
    }

    fn filled(width: usize, height: usize, colour: [u8; 3]) -> Self {
        Self {
            width,
            height,
            pixels: colour.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    fn project(&self, p: &[f64; 2], lo: [f64; 2], hi: [f64; 2]) -> (i64, i64) {
        let margin = 24.0;
        let w = self.width as f64 - 2.0 * margin;
        let h = self.height as f64 - 2.0 * margin;
        let x = margin + (p[0] - lo[0]) / (hi[0] - lo[0]) * w;
        let y = margin + (1.0 - (p[1] - lo[1]) / (hi[1] - lo[1])) * h;
        (x.round() as i64, y.round() as i64)
    }

    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let o = (y as usize * self.width + x as usize) * 3;
            self.pixels[o..o + 3].copy_from_slice(&c);
        }
    }

    fn disc(&mut self, cx: i64, cy: i64, r: i64, c: [u8; 3]) {
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy <= r * r {
                    self.put(cx + dx, cy + dy, c);
                }
            }
        }
    }

    fn rect(&mut self, x: usize, y: usize, w: usize, h: usize, c: [u8; 3]) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.put(xx as i64, yy as i64, c);
            }
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.put(x, y, c);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    /// Blit one `[C, H, W]` item; three channels render as RGB, anything else as the channel mean.
    fn tile(&mut self, x0: usize, y0: usize, item: &[f64], [c, h, w]: [usize; 3], map: fn(f64) -> f64) {
        let byte = |v: f64| (map(v) * 255.0).round() as u8;
        for y in 0..h {
            for x in 0..w {
                let at = |ch: usize| item[(ch * h + y) * w + x];
                let rgb = if c == 3 {
                    [byte(at(0)), byte(at(1)), byte(at(2))]
                } else {
                    let m = (0..c).map(at).sum::<f64>() / c as f64;
                    [byte(m); 3]
                };
                self.put((x0 + x) as i64, (y0 + y) as i64, rgb);
            }
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        image::save_buffer_with_format(path, &self.pixels, self.width as u32, self.height as u32, image::ColorType::Rgb8, image::ImageFormat::Png)?;
        Ok(())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tmp(name: &str) -> PathBuf {
        std::env::temp_dir().join(format!("osfl-viz-{}-{name}", std::process::id()))
    }

    fn blobs(centres: &[[f64; 3]], per: usize, seed: u64) -> Vec<(usize, Tensor)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        centres
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let data = (0..per).flat_map(|_| c.map(|m| m + rng.random_range(-0.1..0.1))).collect();
                (k, Tensor::new(&[per, 3], data).unwrap())
            })
            .collect()
    }

    fn quick() -> TsneConfig {
        TsneConfig {
            iterations: 300,
            exaggeration_iters: 100,
            perplexity: 5.0,
            ..TsneConfig::default()
        }
    }

    #[test]
    fn degenerate_inputs() {
        let p = tmp("same.png");
        let one = Tensor::new(&[1, 2], vec![0.5, 0.5]).unwrap();
        let e = emit_tsne(&[(0, one.clone()), (1, one.clone())], "pre", &p, &quick()).unwrap();
        assert_eq!(e.points.len(), 2);
        assert!(e.points.iter().all(|q| q[0].is_finite() && q[1].is_finite()));
        assert!(p.is_file() && csv_path(&p).is_file());
        assert!(matches!(tsne(&one, &quick()), Err(Error::Data(_))));
        assert!(matches!(emit_tsne(&[(0, one)], "pre", &p, &quick()), Err(Error::Data(_))));
        let _ = std::fs::remove_file(&p);
        let _ = std::fs::remove_file(csv_path(&p));
    }

    #[test]
    fn same_inputs_same_plot_data() {
        let sets = blobs(&[[0.0; 3], [1.0, 1.0, 0.0]], 8, 1);
        let (a, b) = (tmp("a.png"), tmp("b.png"));
        emit_tsne(&sets, "post", &a, &quick()).unwrap();
        emit_tsne(&sets, "post", &b, &quick()).unwrap();
        assert_eq!(std::fs::read(csv_path(&a)).unwrap(), std::fs::read(csv_path(&b)).unwrap());
        for p in [a, b] {
            let _ = std::fs::remove_file(csv_path(&p));
            let _ = std::fs::remove_file(p);
        }
    }

    #[test]
    fn separated_clusters_stay_separated() {
        let far = blobs(&[[0.0; 3], [5.0, 5.0, 5.0]], 15, 2);
        let near = blobs(&[[0.0; 3], [0.02, 0.0, 0.0]], 15, 2);
        let embed = |sets: &[(usize, Tensor)]| {
            let x = Tensor::stack_rows(&sets.iter().map(|(_, t)| t).collect::<Vec<_>>()).unwrap();
            let g: Vec<usize> = sets.iter().flat_map(|(k, t)| std::iter::repeat_n(*k, t.batch())).collect();
            centroid_separation(&tsne(&x, &quick()).unwrap(), &g).unwrap()
        };
        let (f, n) = (embed(&far), embed(&near));
        assert!(f > n + 0.5, "far {f} near {n}");
    }

    #[test]
    fn separation_oracle() {
        let pts = [[0.0, 0.0], [0.0, 0.0], [2.0, 0.0], [2.0, 0.0]];
        assert!((centroid_separation(&pts, &[0, 0, 1, 1]).unwrap() - 2.0).abs() < 1e-12);
        assert!(centroid_separation(&pts, &[0, 0, 0, 0]).is_err());
    }

    #[test]
    fn gallery_layout_and_range_mapping() {
        assert_eq!(feature_to_unit(-1.0), 0.0);
        assert_eq!(feature_to_unit(0.0), 0.5);
        assert_eq!(feature_to_unit(1.0), 1.0);
        let p = tmp("gallery.png");
        for n in [1, 4] {
            let img = Tensor::full(&[n, 1, 5, 6], 1.0);
            let feat = Tensor::full(&[n, 1, 5, 6], -1.0);
            let layout = emit_gallery(&img, &feat, &img, &p).unwrap();
            assert_eq!((layout.rows, layout.cols), (n, 3));
            let png = image::open(&p).unwrap().to_rgb8();
            assert_eq!((png.width() as usize, png.height() as usize), (layout.width, layout.height));
            assert_eq!(png.get_pixel(PAD as u32, PAD as u32).0, [255; 3]);
            assert_eq!(png.get_pixel((2 * PAD + 6) as u32, PAD as u32).0, [0; 3]);
        }
        let bad = emit_gallery(&Tensor::zeros(&[2, 1, 4, 4]), &Tensor::zeros(&[1, 1, 4, 4]), &Tensor::zeros(&[2, 1, 4, 4]), &p);
        assert!(matches!(bad, Err(Error::Data(_))));
        let _ = std::fs::remove_file(p);
    }

    #[test]
    fn loss_curves_write_plot_and_data() {
        let p = tmp("curves.png");
        emit_loss_curves(&[("ce".into(), vec![2.0, 1.0, 0.5]), ("kl".into(), vec![0.3])], &p).unwrap();
        let csv = std::fs::read_to_string(csv_path(&p)).unwrap();
        assert_eq!(csv.lines().count(), 5);
        assert!(p.is_file());
        assert!(emit_loss_curves(&[("x".into(), vec![])], &p).is_err());
        let _ = std::fs::remove_file(csv_path(&p));
        let _ = std::fs::remove_file(p);
    }
}
