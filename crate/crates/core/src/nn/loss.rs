//! Losses used by the two networks. Values are accumulated in `f64`; the
//! returned gradients are w.r.t. the network outputs of the batch mean.

const P_MIN: f64 = 1e-7;

/// Weighted binary cross-entropy: `-[w_pos * y * ln p + (1 - y) * ln(1 - p)]`
/// with `p` clamped to `[1e-7, 1 - 1e-7]`, averaged over the batch.
pub fn weighted_bce(pred: &[f32], labels: &[f32], w_pos: f64) -> (f64, Vec<f32>) {
    assert_eq!(pred.len(), labels.len(), "prediction and label counts differ");
    let n = pred.len().max(1) as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = (p as f64).clamp(P_MIN, 1.0 - P_MIN);
            let y = y as f64;
            loss -= w_pos * y * p.ln() + (1.0 - y) * (1.0 - p).ln();
            ((-w_pos * y / p + (1.0 - y) / (1.0 - p)) / n) as f32
        })
        .collect();
    (loss / n, grad)
}

/// IoU of two 1-D intervals given as `(center, length)`.
pub fn interval_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    iou_with_grad(a, b).0
}

/// IoU and its gradient w.r.t. `a`'s `(center, length)`.
fn iou_with_grad(a: (f64, f64), b: (f64, f64)) -> (f64, f64, f64) {
    let (a0, a1) = (a.0 - 0.5 * a.1, a.0 + 0.5 * a.1);
    let (b0, b1) = (b.0 - 0.5 * b.1, b.0 + 0.5 * b.1);
    let inter = a1.min(b1) - a0.max(b0);
    if inter <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let union = a.1 + b.1 - inter;
    let iou = inter / union;
    // d(inter)/d(a0), d(inter)/d(a1); union = a1 - a0 + len_b - inter
    let di0 = if a0 > b0 { -1.0 } else { 0.0 };
    let di1 = if a1 < b1 { 1.0 } else { 0.0 };
    let d0 = (di0 * union - inter * (-1.0 - di0)) / (union * union);
    let d1 = (di1 * union - inter * (1.0 - di1)) / (union * union);
    (iou, d0 + d1, 0.5 * (d1 - d0))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `(1 - IoU) + alpha * |offset_p - offset_t| + beta * |scale_p - scale_t|`
/// averaged over the batch. `pred` and `target` are `[N x 2]` rows of
/// `(offset, scale)`; offsets locate interval centres and scales their lengths,
/// both in window units.
pub fn regression_loss(pred: &[f32], target: &[f32], alpha: f64, beta: f64) -> (f64, Vec<f32>) {
    assert_eq!(pred.len(), target.len(), "prediction and target counts differ");
    let n = (pred.len() / 2).max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (p, t) in pred.chunks_exact(2).zip(target.chunks_exact(2)) {
        let (po, ps, to, ts) = (p[0] as f64, p[1] as f64, t[0] as f64, t[1] as f64);
        let (iou, d_off, d_scale) = iou_with_grad((po, ps), (to, ts));
        loss += 1.0 - iou + alpha * (po - to).abs() + beta * (ps - ts).abs();
        grad.push(((-d_off + alpha * sign(po - to)) / n) as f32);
        grad.push(((-d_scale + beta * sign(ps - ts)) / n) as f32);
    }
    (loss / n, grad)
}
