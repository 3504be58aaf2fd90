use bifuser_tensor::Tensor;

use super::Point;

/// Binary `[1, size, size]` disc: pixel `(x, y)` is set iff its distance to
/// `center` is at most `radius`. Parts outside the image are clipped.
pub fn make_fovea_mask(center: Point, radius: f64, size: usize) -> Tensor<f32> {
    let mut mask = Tensor::zeros(&[1, size, size]);
    let r = radius.max(0.0);
    let r2 = r * r;
    let lo_y = (center.y - r).ceil().max(0.0);
    let hi_y = (center.y + r).floor().min(size as f64 - 1.0);
    let lo_x = (center.x - r).ceil().max(0.0);
    let hi_x = (center.x + r).floor().min(size as f64 - 1.0);
    let mut count = 0usize;
    if lo_y <= hi_y && lo_x <= hi_x {
        let data = mask.data_mut();
        for y in lo_y as usize..=hi_y as usize {
            let dy = y as f64 - center.y;
            for x in lo_x as usize..=hi_x as usize {
                let dx = x as f64 - center.x;
                if dx * dx + dy * dy <= r2 {
                    data[y * size + x] = 1.0;
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        log::warn!("fovea mask at ({:.1}, {:.1}) r={radius} is empty inside {size}x{size}", center.x, center.y);
    }
    mask
}
