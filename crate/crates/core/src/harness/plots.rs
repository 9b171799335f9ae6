//! FID curves, t-SNE scatter plots and attention overlays.

use std::path::Path;

use image::{Rgb, RgbImage};
use plotters::prelude::*;

use crate::datasets::PatchImage;
use crate::fid::FidSeries;
use crate::{Error, Result};

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Format(format!("plot rendering failed: {e}"))
}

fn padded_range(values: impl Iterator<Item = f64>) -> std::ops::Range<f64> {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return 0.0..1.0;
    }
    let pad = ((hi - lo) * 0.05).max(1e-6);
    (lo - pad)..(hi + pad)
}

/// Raw and smoothed FID against epoch, with the chosen epoch marked.
pub fn plot_fid_curve(series: &FidSeries, path: &Path) -> Result<()> {
    if series.epochs.is_empty() {
        return Err(Error::Validation("empty FID series".into()));
    }
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let x0 = *series.epochs.first().expect("non-empty") as f64;
    let x1 = (*series.epochs.last().expect("non-empty") as f64).max(x0 + 1.0);
    let y = padded_range(series.raw.iter().chain(&series.smoothed).copied());
    let mut chart = ChartBuilder::on(&root)
        .caption("FID per checkpoint", ("sans-serif", 22))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("epoch").y_desc("FID").draw().map_err(plot_err)?;
    let raw: Vec<(f64, f64)> = series.epochs.iter().zip(&series.raw).map(|(&e, &v)| (e as f64, v)).collect();
    let smooth: Vec<(f64, f64)> = series.epochs.iter().zip(&series.smoothed).map(|(&e, &v)| (e as f64, v)).collect();
    chart
        .draw_series(LineSeries::new(raw, BLUE.mix(0.5)))
        .map_err(plot_err)?
        .label("raw")
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], BLUE.mix(0.5)));
    chart
        .draw_series(LineSeries::new(smooth, RED.stroke_width(2)))
        .map_err(plot_err)?
        .label(format!("smoothed (alpha = {})", series.alpha))
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], RED.stroke_width(2)));
    if let Ok(best) = series.best_index() {
        chart
            .draw_series(std::iter::once(Circle::new((series.epochs[best] as f64, series.smoothed[best]), 6, BLACK.filled())))
            .map_err(plot_err)?
            .label(format!("best epoch {}", series.epochs[best]))
            .legend(|(x, y)| Circle::new((x + 10, y), 4, BLACK.filled()));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// One labelled group of 2-D points.
pub struct ScatterGroup<'a> {
    pub name: &'a str,
    pub points: &'a [[f64; 2]],
    pub color: RGBColor,
}

pub const PALETTE: [RGBColor; 8] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
    RGBColor(227, 119, 194),
    RGBColor(127, 127, 127),
];

pub fn plot_scatter(title: &str, groups: &[ScatterGroup<'_>], path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, (700, 700)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let all = || groups.iter().flat_map(|g| g.points.iter());
    let xr = padded_range(all().map(|p| p[0]));
    let yr = padded_range(all().map(|p| p[1]));
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(15)
        .x_label_area_size(30)
        .y_label_area_size(40)
        .build_cartesian_2d(xr, yr)
        .map_err(plot_err)?;
    chart.configure_mesh().draw().map_err(plot_err)?;
    for g in groups {
        let color = g.color;
        chart
            .draw_series(g.points.iter().map(|p| Circle::new((p[0], p[1]), 3, color.filled())))
            .map_err(plot_err)?
            .label(g.name)
            .legend(move |(x, y)| Circle::new((x + 10, y), 4, color.filled()));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Attention received by each source position, Σ_j α_ji over the `[N, N]` map, rescaled to [0, 1].
pub fn attention_mass(attention: &[f64], n: usize) -> Result<Vec<f64>> {
    if attention.len() != n * n || n == 0 {
        return Err(Error::Validation(format!("{} attention weights for {n} positions", attention.len())));
    }
    let mut mass = vec![0.0; n];
    for row in attention.chunks(n) {
        mass.iter_mut().zip(row).for_each(|(m, a)| *m += a);
    }
    let (lo, hi) = mass.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = hi - lo;
    Ok(mass.iter().map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 }).collect())
}

fn heat(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    [(1.5 - (4.0 * t - 3.0).abs()).clamp(0.0, 1.0), (1.5 - (4.0 * t - 2.0).abs()).clamp(0.0, 1.0), (1.5 - (4.0 * t - 1.0).abs()).clamp(0.0, 1.0)]
}

/// Image on the left, image blended with the upsampled attention heat map on the right.
pub fn attention_overlay(image: &PatchImage, mass: &[f64], grid: (usize, usize)) -> Result<RgbImage> {
    let (gh, gw) = grid;
    if mass.len() != gh * gw {
        return Err(Error::Validation(format!("{} attention values for a {gh}x{gw} grid", mass.len())));
    }
    let (h, w) = (image.height(), image.width());
    let base = image.to_rgb8();
    let mut out = RgbImage::new(2 * w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = *base.get_pixel(x as u32, y as u32);
            out.put_pixel(x as u32, y as u32, px);
            let m = mass[(y * gh / h) * gw + x * gw / w];
            let c = heat(m);
            let blend = |k: usize| (0.5 * px[k] as f64 + 0.5 * 255.0 * c[k]).round() as u8;
            out.put_pixel((w + x) as u32, y as u32, Rgb([blend(0), blend(1), blend(2)]));
        }
    }
    Ok(out)
}

/// Tiles overlays vertically into one PNG.
pub fn save_overlays(tiles: &[RgbImage], path: &Path) -> Result<()> {
    let first = tiles.first().ok_or_else(|| Error::Validation("no attention overlays".into()))?;
    let (w, h) = first.dimensions();
    let mut sheet = RgbImage::new(w, h * tiles.len() as u32);
    for (i, t) in tiles.iter().enumerate() {
        image::imageops::replace(&mut sheet, t, 0, (i as u32 * h) as i64);
    }
    sheet.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fid_plot_contains_both_series() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fid.svg");
        let s = FidSeries::new(vec![1, 2, 3, 4], vec![9.0, 4.0, 6.0, 3.0], 0.5).unwrap();
        plot_fid_curve(&s, &path).unwrap();
        let svg = std::fs::read_to_string(&path).unwrap();
        assert!(svg.contains("raw"));
        assert!(svg.contains("smoothed"));
        assert!(svg.matches("<polyline").count() >= 2);
    }

    #[test]
    fn attention_mass_is_normalised() {
        // two positions, both rows attend mostly to position 1
        let m = attention_mass(&[0.2, 0.8, 0.1, 0.9], 2).unwrap();
        assert_eq!(m, vec![0.0, 1.0]);
        assert_eq!(attention_mass(&[0.5, 0.5, 0.5, 0.5], 2).unwrap(), vec![0.0, 0.0]);
        assert!(attention_mass(&[1.0], 2).is_err());
    }

    #[test]
    fn overlay_and_scatter_render() {
        let dir = tempfile::tempdir().unwrap();
        let img = PatchImage::new(4, 4, vec![0.5; 48]).unwrap();
        let tile = attention_overlay(&img, &[0.0, 1.0, 0.5, 0.25], (2, 2)).unwrap();
        assert_eq!(tile.dimensions(), (8, 4));
        save_overlays(&[tile.clone(), tile], &dir.path().join("att.png")).unwrap();
        let pts = [[0.0, 1.0], [1.0, 0.0]];
        let g = [ScatterGroup { name: "real", points: &pts, color: PALETTE[0] }];
        plot_scatter("t-SNE", &g, &dir.path().join("tsne.svg")).unwrap();
        assert!(std::fs::read_to_string(dir.path().join("tsne.svg")).unwrap().contains("real"));
    }
}
