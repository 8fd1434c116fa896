//! Scatter plots as binary PPM.

use anyhow::{bail, Result};

pub const SIZE: usize = 512;
const MARGIN: f64 = 0.05;
const BACKGROUND: [u8; 3] = [255, 255, 255];
const PALETTE: [[u8; 3]; 6] = [
    [228, 26, 28],
    [55, 126, 184],
    [77, 175, 74],
    [152, 78, 163],
    [255, 127, 0],
    [166, 86, 40],
];

/// A point to draw and the palette index it is colored by.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mark {
    pub x: f64,
    pub y: f64,
    pub group: usize,
}

fn axis(lo: f64, hi: f64) -> (f64, f64) {
    let span = hi - lo;
    if span > 0.0 {
        (lo - MARGIN * span, hi + MARGIN * span)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

fn to_pixel(v: f64, (lo, hi): (f64, f64)) -> i64 {
    ((v - lo) / (hi - lo) * (SIZE - 1) as f64).round() as i64
}

/// Pixel center of each mark, with y growing downwards.
pub fn layout(marks: &[Mark]) -> Result<Vec<(i64, i64)>> {
    if marks.is_empty() {
        bail!("nothing to render");
    }
    if marks.iter().any(|m| !m.x.is_finite() || !m.y.is_finite()) {
        bail!("non-finite point");
    }
    let fold = |f: fn(&Mark) -> f64| {
        marks
            .iter()
            .map(f)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let (x0, x1) = fold(|m| m.x);
    let (y0, y1) = fold(|m| m.y);
    let (xa, ya) = (axis(x0, x1), axis(y0, y1));
    Ok(marks
        .iter()
        .map(|m| (to_pixel(m.x, xa), SIZE as i64 - 1 - to_pixel(m.y, ya)))
        .collect())
}

/// 512×512 P6 image with a 3×3 square per mark. Later marks paint over earlier ones.
pub fn render_ppm(marks: &[Mark]) -> Result<Vec<u8>> {
    let centers = layout(marks)?;
    let mut pixels = vec![BACKGROUND; SIZE * SIZE];
    for (m, (cx, cy)) in marks.iter().zip(centers) {
        let color = PALETTE[m.group % PALETTE.len()];
        for y in cy - 1..=cy + 1 {
            for x in cx - 1..=cx + 1 {
                if (0..SIZE as i64).contains(&x) && (0..SIZE as i64).contains(&y) {
                    pixels[y as usize * SIZE + x as usize] = color;
                }
            }
        }
    }
    let mut out = format!("P6\n{SIZE} {SIZE}\n255\n").into_bytes();
    out.extend(pixels.iter().flatten());
    Ok(out)
}

/// Marks for every 2-D component of each row, colored by component.
pub fn component_marks(rows: &[Vec<f64>]) -> Vec<Mark> {
    rows.iter()
        .flat_map(|row| {
            row.chunks_exact(2).enumerate().map(|(group, p)| Mark {
                x: p[0],
                y: p[1],
                group,
            })
        })
        .collect()
}
