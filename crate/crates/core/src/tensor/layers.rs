//! Normalization, pooling, upsampling and concatenation over `[B, C, H, W]`.

use super::{ensure_finite, DenseTensor, Tape};
use crate::error::{Error, Result};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Eval,
}

/// Per-channel running statistics, updated in train mode with momentum 0.1
/// (unbiased batch variance), consumed in eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

fn dims4(op: &'static str, t: &DenseTensor) -> Result<(usize, usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::shape(op, format!("expected rank 4, got {s:?}")));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// Batch normalization over `[B, C, H, W]` (statistics per channel across
/// B·H·W). Train mode normalizes with batch statistics (ε = 1e-5) and
/// updates `running`; eval mode normalizes with the running statistics.
pub fn batchnorm(
    tape: &mut Tape,
    x: &DenseTensor,
    gamma: &DenseTensor,
    beta: &DenseTensor,
    running: &mut RunningStats,
    mode: BatchNormMode,
) -> Result<DenseTensor> {
    let (b, c, h, w) = dims4("batchnorm", x)?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "batchnorm",
            format!("channel axis {c} vs gamma {:?} / beta {:?}", gamma.shape(), beta.shape()),
        ));
    }
    if running.channels() != c {
        return Err(Error::shape(
            "batchnorm",
            format!("running stats for {} channels, input has {c}", running.channels()),
        ));
    }
    let plane = h * w;
    let n = b * plane;
    let nf = n as f64;

    let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
        BatchNormMode::Train => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let mut s = 0.0;
                for bi in 0..b {
                    let base = (bi * c + ci) * plane;
                    s += x.values()[base..base + plane].iter().sum::<f64>();
                }
                let mu = s / nf;
                let mut v = 0.0;
                for bi in 0..b {
                    let base = (bi * c + ci) * plane;
                    v += x.values()[base..base + plane]
                        .iter()
                        .map(|&e| (e - mu) * (e - mu))
                        .sum::<f64>();
                }
                mean[ci] = mu;
                var[ci] = v / nf;
            }
            // Running update uses the unbiased batch variance when defined.
            for ci in 0..c {
                let unbiased = if n > 1 { var[ci] * nf / (nf - 1.0) } else { var[ci] };
                running.mean[ci] = (1.0 - BN_MOMENTUM) * running.mean[ci] + BN_MOMENTUM * mean[ci];
                running.var[ci] = (1.0 - BN_MOMENTUM) * running.var[ci] + BN_MOMENTUM * unbiased;
            }
            (mean, var)
        }
        BatchNormMode::Eval => (running.mean.clone(), running.var.clone()),
    };

    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * plane;
            let (g, bt, mu, inv) = (gamma.values()[ci], beta.values()[ci], mean[ci], inv_std[ci]);
            for i in 0..plane {
                out[base + i] = g * (x.values()[base + i] - mu) * inv + bt;
            }
        }
    }
    ensure_finite("batchnorm", &out)?;

    let node = tape.node_for_output(
        x.is_tracked() || gamma.is_tracked() || beta.is_tracked(),
        out.len(),
    );
    if let Some(id) = node {
        let (xn, gn, bn) = (x.node(), gamma.node(), beta.node());
        let xv = x.shared_values();
        let gv = gamma.shared_values();
        tape.record(id, move |dout, grads| {
            let mut dx = xn.map(|_| vec![0.0; xv.len()]);
            let mut dg = gn.map(|_| vec![0.0; c]);
            let mut db = bn.map(|_| vec![0.0; c]);
            for ci in 0..c {
                let (mu, inv, g) = (mean[ci], inv_std[ci], gv[ci]);
                let mut sum_d = 0.0;
                let mut sum_dxhat = 0.0;
                for bi in 0..b {
                    let base = (bi * c + ci) * plane;
                    for i in 0..plane {
                        let d = dout[base + i];
                        sum_d += d;
                        sum_dxhat += d * (xv[base + i] - mu) * inv;
                    }
                }
                if let Some(dg) = dg.as_mut() {
                    dg[ci] = sum_dxhat;
                }
                if let Some(db) = db.as_mut() {
                    db[ci] = sum_d;
                }
                if let Some(dx) = dx.as_mut() {
                    match mode {
                        BatchNormMode::Train => {
                            for bi in 0..b {
                                let base = (bi * c + ci) * plane;
                                for i in 0..plane {
                                    let xhat = (xv[base + i] - mu) * inv;
                                    dx[base + i] = g * inv / nf
                                        * (nf * dout[base + i] - sum_d - xhat * sum_dxhat);
                                }
                            }
                        }
                        BatchNormMode::Eval => {
                            for bi in 0..b {
                                let base = (bi * c + ci) * plane;
                                for i in 0..plane {
                                    dx[base + i] = g * inv * dout[base + i];
                                }
                            }
                        }
                    }
                }
            }
            if let (Some(n), Some(d)) = (xn, dx) {
                grads.accumulate(n, &d);
            }
            if let (Some(n), Some(d)) = (gn, dg) {
                grads.accumulate(n, &d);
            }
            if let (Some(n), Some(d)) = (bn, db) {
                grads.accumulate(n, &d);
            }
        });
    }
    Ok(DenseTensor::tracked(out, x.shape().to_vec(), node))
}

/// Max pooling with window `k` and stride `k`. Backward routes the gradient
/// to the argmax position of each window (first hit in scan order on ties).
pub fn maxpool2d(tape: &mut Tape, x: &DenseTensor, k: usize) -> Result<DenseTensor> {
    let (b, c, h, w) = dims4("maxpool2d", x)?;
    if k < 1 || h < k || w < k {
        return Err(Error::shape(
            "maxpool2d",
            format!("window {k} on spatial {h}x{w}"),
        ));
    }
    let (oh, ow) = (h / k, w / k);
    let mut out = vec![0.0; b * c * oh * ow];
    let mut argmax = vec![0usize; out.len()];
    for bi in 0..b {
        for ci in 0..c {
            let in_base = (bi * c + ci) * h * w;
            let out_base = (bi * c + ci) * oh * ow;
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for u in 0..k {
                        for v in 0..k {
                            let idx = in_base + (y * k + u) * w + xo * k + v;
                            if x.values()[idx] > best {
                                best = x.values()[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[out_base + y * ow + xo] = best;
                    argmax[out_base + y * ow + xo] = best_idx;
                }
            }
        }
    }
    let node = tape.node_for_output(x.is_tracked(), out.len());
    if let Some(id) = node {
        let xn = x.node();
        let total = x.len();
        tape.record(id, move |dout, grads| {
            if let Some(xn) = xn {
                let mut d = vec![0.0; total];
                for (o, &src) in argmax.iter().enumerate() {
                    d[src] += dout[o];
                }
                grads.accumulate(xn, &d);
            }
        });
    }
    Ok(DenseTensor::tracked(out, vec![b, c, oh, ow], node))
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(tape: &mut Tape, x: &DenseTensor, factor: usize) -> Result<DenseTensor> {
    let (b, c, h, w) = dims4("upsample_nearest", x)?;
    if factor < 1 {
        return Err(Error::shape("upsample_nearest", "factor must be >= 1"));
    }
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0; b * c * oh * ow];
    for bi in 0..b {
        for ci in 0..c {
            let in_base = (bi * c + ci) * h * w;
            let out_base = (bi * c + ci) * oh * ow;
            for y in 0..oh {
                let iy = y / factor;
                for xo in 0..ow {
                    out[out_base + y * ow + xo] = x.values()[in_base + iy * w + xo / factor];
                }
            }
        }
    }
    let node = tape.node_for_output(x.is_tracked(), out.len());
    if let Some(id) = node {
        let xn = x.node();
        let total = x.len();
        tape.record(id, move |dout, grads| {
            if let Some(xn) = xn {
                let mut d = vec![0.0; total];
                for bi in 0..b {
                    for ci in 0..c {
                        let in_base = (bi * c + ci) * h * w;
                        let out_base = (bi * c + ci) * oh * ow;
                        for y in 0..oh {
                            let iy = y / factor;
                            for xo in 0..ow {
                                d[in_base + iy * w + xo / factor] += dout[out_base + y * ow + xo];
                            }
                        }
                    }
                }
                grads.accumulate(xn, &d);
            }
        });
    }
    Ok(DenseTensor::tracked(out, vec![b, c, oh, ow], node))
}

/// Concatenate along the channel axis. All inputs must agree on batch and
/// spatial dimensions; the output channel count is the sum of the inputs'.
pub fn concat_channels(tape: &mut Tape, inputs: &[&DenseTensor]) -> Result<DenseTensor> {
    if inputs.is_empty() {
        return Err(Error::EmptyInput("concat_channels"));
    }
    let (b, _, h, w) = dims4("concat_channels", inputs[0])?;
    let mut channels = Vec::with_capacity(inputs.len());
    for t in inputs {
        let (tb, tc, th, tw) = dims4("concat_channels", t)?;
        if (tb, th, tw) != (b, h, w) {
            return Err(Error::shape(
                "concat_channels",
                format!(
                    "non-channel dims differ: [{b},_,{h},{w}] vs [{tb},_,{th},{tw}]"
                ),
            ));
        }
        channels.push(tc);
    }
    let c_total: usize = channels.iter().sum();
    let plane = h * w;
    let mut out = vec![0.0; b * c_total * plane];
    for bi in 0..b {
        let mut c_off = 0;
        for (t, &tc) in inputs.iter().zip(&channels) {
            let src = &t.values()[bi * tc * plane..(bi + 1) * tc * plane];
            let dst = (bi * c_total + c_off) * plane;
            out[dst..dst + tc * plane].copy_from_slice(src);
            c_off += tc;
        }
    }
    let any_tracked = inputs.iter().any(|t| t.is_tracked());
    let node = tape.node_for_output(any_tracked, out.len());
    if let Some(id) = node {
        let nodes: Vec<_> = inputs.iter().map(|t| t.node()).collect();
        let sizes: Vec<usize> = channels.clone();
        tape.record(id, move |dout, grads| {
            for (slot, (n, &tc)) in nodes.iter().zip(sizes.iter()).enumerate() {
                if let Some(n) = n {
                    let mut d = vec![0.0; b * tc * plane];
                    let c_off: usize = sizes[..slot].iter().sum();
                    for bi in 0..b {
                        let src = (bi * c_total + c_off) * plane;
                        d[bi * tc * plane..(bi + 1) * tc * plane]
                            .copy_from_slice(&dout[src..src + tc * plane]);
                    }
                    grads.accumulate(*n, &d);
                }
            }
        });
    }
    Ok(DenseTensor::tracked(out, vec![b, c_total, h, w], node))
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::{central_diff_check, loss_of};
    use super::super::{slice_flat, sum};
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn batchnorm_normalizes_to_unit_stats() {
        // channel with mean 5, std 2
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vals: Vec<f64> = (0..2 * 1 * 8 * 8).map(|_| 5.0 + 2.0 * rng.random_range(-1.0..1.0f64)).collect();
        // force exact sample stats by standardizing, then rescaling
        let n = vals.len() as f64;
        let mu = vals.iter().sum::<f64>() / n;
        let sd = (vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n).sqrt();
        let vals: Vec<f64> = vals.iter().map(|v| 5.0 + 2.0 * (v - mu) / sd).collect();

        let x = DenseTensor::from_vec(vals, &[2, 1, 8, 8]).unwrap();
        let gamma = DenseTensor::from_vec(vec![1.0], &[1]).unwrap();
        let beta = DenseTensor::from_vec(vec![0.0], &[1]).unwrap();
        let mut running = RunningStats::new(1);
        let mut tape = Tape::new();
        let y = batchnorm(&mut tape, &x, &gamma, &beta, &mut running, BatchNormMode::Train).unwrap();
        let ym = y.values().iter().sum::<f64>() / n;
        let ysd = (y.values().iter().map(|v| (v - ym) * (v - ym)).sum::<f64>() / n).sqrt();
        assert!(ym.abs() < 1e-6, "mean {ym}");
        assert!((ysd - 1.0).abs() < 1e-5, "std {ysd}");
    }

    #[test]
    fn batchnorm_gamma_zero_gives_beta() {
        let x = DenseTensor::from_vec((0..8).map(|i| i as f64).collect(), &[1, 2, 2, 2]).unwrap();
        let gamma = DenseTensor::from_vec(vec![0.0, 0.0], &[2]).unwrap();
        let beta = DenseTensor::from_vec(vec![3.5, -1.0], &[2]).unwrap();
        let mut running = RunningStats::new(2);
        let mut tape = Tape::new();
        let y = batchnorm(&mut tape, &x, &gamma, &beta, &mut running, BatchNormMode::Train).unwrap();
        assert_eq!(&y.values()[..4], &[3.5; 4]);
        assert_eq!(&y.values()[4..], &[-1.0; 4]);
    }

    #[test]
    fn batchnorm_single_sample_zero_variance_is_guarded() {
        let x = DenseTensor::from_vec(vec![7.0], &[1, 1, 1, 1]).unwrap();
        let gamma = DenseTensor::from_vec(vec![1.0], &[1]).unwrap();
        let beta = DenseTensor::from_vec(vec![0.0], &[1]).unwrap();
        let mut running = RunningStats::new(1);
        let mut tape = Tape::new();
        let y = batchnorm(&mut tape, &x, &gamma, &beta, &mut running, BatchNormMode::Train).unwrap();
        assert!(y.values()[0].is_finite());
        assert_eq!(y.values()[0], 0.0); // (x - x) / sqrt(0 + eps)
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let x = DenseTensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]).unwrap();
        let gamma = DenseTensor::from_vec(vec![1.0], &[1]).unwrap();
        let beta = DenseTensor::from_vec(vec![0.0], &[1]).unwrap();
        let mut running = RunningStats::new(1);
        running.mean[0] = 2.0;
        running.var[0] = 4.0;
        let mut tape = Tape::new();
        let y = batchnorm(&mut tape, &x, &gamma, &beta, &mut running, BatchNormMode::Eval).unwrap();
        for (yi, xi) in y.values().iter().zip(x.values()) {
            let expect = (xi - 2.0) / (4.0f64 + 1e-5).sqrt();
            assert!((yi - expect).abs() < 1e-12);
        }
        // eval must not touch the stats
        assert_eq!(running.mean[0], 2.0);
        assert_eq!(running.var[0], 4.0);
    }

    #[test]
    fn batchnorm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n_x = 2 * 3 * 4 * 4;
        let mut x0: Vec<f64> = (0..n_x + 6).map(|_| rng.random_range(-2.0..2.0)).collect();
        // keep gammas away from zero so relative errors are well-scaled
        for g in &mut x0[n_x..n_x + 3] {
            *g = 0.5 + g.abs();
        }
        let report = central_diff_check(
            &x0,
            |tape, leaf| {
                let x = slice_flat(tape, leaf, 0, n_x, &[2, 3, 4, 4])?;
                let gamma = slice_flat(tape, leaf, n_x, 3, &[3])?;
                let beta = slice_flat(tape, leaf, n_x + 3, 3, &[3])?;
                let mut running = RunningStats::new(3);
                let y = batchnorm(tape, &x, &gamma, &beta, &mut running, BatchNormMode::Train)?;
                loss_of(tape, &y)
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn maxpool_basic_and_backward_routing() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]).unwrap();
        let y = maxpool2d(&mut tape, &x, 2).unwrap();
        assert_eq!(y.values(), &[4.0]);
        let loss = sum(&mut tape, &y).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad(&x).unwrap(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn upsample_then_maxpool_is_identity_on_constant() {
        let mut tape = Tape::new();
        let x = DenseTensor::from_vec(vec![0.7; 2 * 3 * 3], &[1, 2, 3, 3]).unwrap();
        let up = upsample_nearest(&mut tape, &x, 2).unwrap();
        assert_eq!(up.shape(), &[1, 2, 6, 6]);
        let down = maxpool2d(&mut tape, &up, 2).unwrap();
        assert_eq!(down.shape(), x.shape());
        assert_eq!(down.values(), x.values());
    }

    #[test]
    fn concat_channel_count_and_split_backward() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![1.0; 3 * 4], &[1, 3, 2, 2]).unwrap();
        let b = tape.leaf(vec![2.0; 5 * 4], &[1, 5, 2, 2]).unwrap();
        let y = concat_channels(&mut tape, &[&a, &b]).unwrap();
        assert_eq!(y.shape(), &[1, 8, 2, 2]);
        let loss = sum(&mut tape, &y).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad(&a).unwrap().len(), 12);
        assert!(tape.grad(&b).unwrap().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn concat_rejects_mismatched_spatial() {
        let mut tape = Tape::new();
        let a = DenseTensor::from_vec(vec![0.0; 4], &[1, 1, 2, 2]).unwrap();
        let b = DenseTensor::from_vec(vec![0.0; 9], &[1, 1, 3, 3]).unwrap();
        assert!(concat_channels(&mut tape, &[&a, &b]).is_err());
    }

    #[test]
    fn pool_and_upsample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        // distinct values so pooling has no ties
        let mut x0: Vec<f64> = (0..2 * 4 * 4).map(|i| i as f64 * 0.13).collect();
        for v in x0.iter_mut() {
            *v += rng.random_range(-0.01..0.01);
        }
        let report = central_diff_check(
            &x0,
            |tape, leaf| {
                let x = slice_flat(tape, leaf, 0, 32, &[1, 2, 4, 4])?;
                let y = maxpool2d(tape, &x, 2)?;
                let z = upsample_nearest(tape, &y, 2)?;
                loss_of(tape, &z)
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }
}
