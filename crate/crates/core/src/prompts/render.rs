//! Pixel-level prompt renderers. All functions return a new frame and never
//! write outside the frame bounds.

use image::{Rgb, RgbImage};

use super::glyphs::{render_digits, GLYPH_H};
use super::relevance::RelevanceMap;
use super::PromptConfig;
use crate::grounding::BoundingBox;

pub const RED: Rgb<u8> = Rgb([255, 0, 0]);
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);

fn diagonal(frame: &RgbImage) -> f64 {
    f64::from(frame.width()).hypot(f64::from(frame.height()))
}

/// Stroke width in pixels for circle outlines on this frame.
pub fn stroke_width(frame: &RgbImage, cfg: &PromptConfig) -> f64 {
    (cfg.stroke_fraction * diagonal(frame)).max(cfg.min_stroke_px)
}

/// Red ellipse outline around each box, centered on the box with semi-axes
/// `(1 + margin) / 2` times the box size.
pub fn apply_red_circle(frame: &RgbImage, boxes: &[BoundingBox], cfg: &PromptConfig) -> RgbImage {
    let mut out = frame.clone();
    let (w, h) = (f64::from(frame.width()), f64::from(frame.height()));
    let half_stroke = stroke_width(frame, cfg) / 2.0;
    let k = 0.5 * (1.0 + cfg.circle_margin);
    for b in boxes {
        let (cx, cy) = (b.center().0 * w, b.center().1 * h);
        let a = (k * b.width() * w).max(0.5);
        let bb = (k * b.height() * h).max(0.5);
        let reach_x = a + half_stroke + 1.0;
        let reach_y = bb + half_stroke + 1.0;
        let x0 = (cx - reach_x).floor().max(0.0) as u32;
        let y0 = (cy - reach_y).floor().max(0.0) as u32;
        let x1 = ((cx + reach_x).ceil().max(0.0) as u32).min(frame.width());
        let y1 = ((cy + reach_y).ceil().max(0.0) as u32).min(frame.height());
        for y in y0..y1 {
            for x in x0..x1 {
                let dx = f64::from(x) + 0.5 - cx;
                let dy = f64::from(y) + 0.5 - cy;
                let f = (dx / a).powi(2) + (dy / bb).powi(2) - 1.0;
                let grad = 2.0 * (dx * dx / a.powi(4) + dy * dy / bb.powi(4)).sqrt();
                if grad == 0.0 {
                    continue;
                }
                // First-order distance from the pixel center to the ellipse.
                if f.abs() / grad <= half_stroke {
                    out.put_pixel(x, y, RED);
                }
            }
        }
    }
    out
}

fn pixel_in_box(x: u32, y: u32, w: f64, h: f64, b: &BoundingBox) -> bool {
    let px = (f64::from(x) + 0.5) / w;
    let py = (f64::from(y) + 0.5) / h;
    b.x1 <= px && px <= b.x2 && b.y1 <= py && py <= b.y2
}

/// Scales every pixel whose center lies outside all boxes by `factor`.
pub fn apply_darken(frame: &RgbImage, boxes: &[BoundingBox], factor: f64) -> RgbImage {
    let factor = factor.clamp(0.0, 1.0);
    let (w, h) = (f64::from(frame.width()), f64::from(frame.height()));
    let mut out = frame.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        if boxes.iter().any(|b| pixel_in_box(x, y, w, h, b)) {
            continue;
        }
        for c in px.0.iter_mut() {
            *c = (f64::from(*c) * factor).round() as u8;
        }
    }
    out
}

/// Integer glyph scale for the configured label height.
pub fn glyph_scale(frame_height: u32, cfg: &PromptConfig) -> u32 {
    let target = cfg.glyph_height_fraction * f64::from(frame_height);
    ((target / f64::from(GLYPH_H)).round() as u32).max(1)
}

fn draw_label(frame: &mut RgbImage, label: &str, keyframe: bool, cfg: &PromptConfig) {
    let scale = glyph_scale(frame.height(), cfg);
    let (gw, gh, mask) = render_digits(label, scale);
    if gw == 0 {
        return;
    }
    let margin = (frame.height() / 50).max(2) as i64;
    let x0 = frame.width() as i64 - margin - gw as i64;
    let y0 = frame.height() as i64 - margin - gh as i64;
    let put = |frame: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>| {
        if x >= 0 && y >= 0 && (x as u32) < frame.width() && (y as u32) < frame.height() {
            frame.put_pixel(x as u32, y as u32, color);
        }
    };
    let on = |gx: i64, gy: i64| -> bool {
        gx >= 0 && gy >= 0 && gx < gw as i64 && gy < gh as i64 && mask[(gy as u32 * gw + gx as u32) as usize]
    };
    if !keyframe {
        for gy in -1..=gh as i64 {
            for gx in -1..=gw as i64 {
                let near = (-1..=1).any(|dy| (-1..=1).any(|dx| on(gx + dx, gy + dy)));
                if near && !on(gx, gy) {
                    put(frame, x0 + gx, y0 + gy, BLACK);
                }
            }
        }
    }
    let color = if keyframe { RED } else { WHITE };
    for gy in 0..gh as i64 {
        for gx in 0..gw as i64 {
            if on(gx, gy) {
                put(frame, x0 + gx, y0 + gy, color);
            }
        }
    }
}

/// Writes the 1-based frame index in the bottom-right corner of every frame.
/// Keyframes get a red label, other frames white with a black outline.
pub fn apply_frame_numbers(frames: &[RgbImage], keyframe_indices: &[usize], cfg: &PromptConfig) -> Vec<RgbImage> {
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let mut out = f.clone();
            draw_label(&mut out, &(i + 1).to_string(), keyframe_indices.contains(&i), cfg);
            out
        })
        .collect()
}

/// Black-red-yellow-white ramp, non-decreasing in every channel.
pub fn heat_color(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    [
        (3.0 * v).clamp(0.0, 1.0) * 255.0,
        (3.0 * v - 1.0).clamp(0.0, 1.0) * 255.0,
        (3.0 * v - 2.0).clamp(0.0, 1.0) * 255.0,
    ]
}

/// Min-max normalizes `relevance`, upsamples it bilinearly to the frame and
/// blends the heat color in with per-pixel alpha `weight * relevance`.
/// A constant map leaves the frame unchanged.
pub fn apply_attention_overlay(frame: &RgbImage, relevance: &RelevanceMap, weight: f64) -> RgbImage {
    let Some(norm) = relevance.normalized() else {
        return frame.clone();
    };
    let (w, h) = (frame.width(), frame.height());
    let mut out = frame.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        let gx = (f64::from(x) + 0.5) / f64::from(w) * norm.cols as f64 - 0.5;
        let gy = (f64::from(y) + 0.5) / f64::from(h) * norm.rows as f64 - 0.5;
        let v = norm.sample_bilinear(gx, gy);
        let alpha = (weight * v).clamp(0.0, 1.0);
        if alpha == 0.0 {
            continue;
        }
        let heat = heat_color(v);
        for (c, hc) in px.0.iter_mut().zip(heat) {
            *c = ((1.0 - alpha) * f64::from(*c) + alpha * hc).round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}
