//! Shape rasterization. Integer point-in-shape tests, no anti-aliasing, so
//! every mask is exactly binary.

use ndarray::Array2;

pub fn is_known_shape(name: &str) -> bool {
    matches!(name, "circle" | "square" | "triangle" | "diamond" | "cross")
}

pub fn color_rgb(name: &str) -> Option<[f32; 3]> {
    Some(match name {
        "red" => [0.85, 0.10, 0.10],
        "green" => [0.10, 0.65, 0.15],
        "blue" => [0.12, 0.25, 0.85],
        "yellow" => [0.90, 0.85, 0.10],
        "purple" => [0.55, 0.15, 0.70],
        "orange" => [0.95, 0.55, 0.05],
        _ => return None,
    })
}

/// Binary mask of `shape` centered at `(cx, cy)` with half-extent `size`.
pub fn rasterize_mask(
    shape: &str,
    center: (usize, usize),
    size: usize,
    image_size: usize,
) -> Array2<u8> {
    let (cx, cy) = (center.0 as i64, center.1 as i64);
    let r = size as i64;
    let mut mask = Array2::<u8>::zeros((image_size, image_size));
    for y in 0..image_size as i64 {
        for x in 0..image_size as i64 {
            let (dx, dy) = (x - cx, y - cy);
            if dx.abs() > r || dy.abs() > r {
                continue;
            }
            let inside = match shape {
                "circle" => dx * dx + dy * dy <= r * r,
                "square" => true, // |dx|,|dy| <= r already holds here
                "diamond" => dx.abs() + dy.abs() <= r,
                // apex up, flat base: half-width grows as t/2 toward the base
                "triangle" => {
                    let t = dy + r; // 0 at apex row, 2r at base row
                    t >= 0 && 2 * dx.abs() <= t
                }
                "cross" => {
                    let arm = (r / 3).max(1);
                    dx.abs() <= arm || dy.abs() <= arm
                }
                _ => false,
            };
            if inside {
                mask[(y as usize, x as usize)] = 1;
            }
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn circle_mask_is_symmetric() {
        let m = rasterize_mask("circle", (16, 16), 6, 32);
        for y in 0..32usize {
            for d in 0..10usize {
                assert_eq!(m[(y, 16 - d)], m[(y, 16 + d)], "vertical axis at y={y} d={d}");
            }
        }
        for x in 0..32usize {
            for d in 0..10usize {
                assert_eq!(m[(16 - d, x)], m[(16 + d, x)], "horizontal axis at x={x} d={d}");
            }
        }
        assert!(m.iter().any(|&v| v == 1));
    }

    #[test]
    fn square_fills_its_box_exactly() {
        let m = rasterize_mask("square", (10, 10), 3, 24);
        let count = m.iter().filter(|&&v| v == 1).count();
        assert_eq!(count, 7 * 7);
    }

    #[test]
    fn all_shapes_render_nonempty() {
        for s in ["circle", "square", "triangle", "diamond", "cross"] {
            let m = rasterize_mask(s, (20, 20), 7, 48);
            assert!(m.iter().any(|&v| v == 1), "{s} rendered empty");
        }
    }
}
