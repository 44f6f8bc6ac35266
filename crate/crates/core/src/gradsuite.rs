//! The full gradient-check suite: every differentiable op, the correlation
//! loss, and an end-to-end pass through the network with respect to a random
//! subset of its parameters. Used by the `gradcheck` command and the
//! acceptance tests.

use crate::dcca::{dcca_loss, DccaConfig, ViewFeatures};
use crate::error::Result;
use crate::netops::{
    bce_heatmap_loss, bilinear_upsample, blurpool2d, conv2d, ff_parser, l1_coord_loss, mha,
    soft_argmax, AttentionParams, BlurKernel, ConvParams, SpectralFilter,
};
use crate::network::{forward, init_params, NetworkConfig};
use crate::rng::Rng;
use crate::tensor::{grad_check, GradCheckConfig, GradReport, Tape, Tensor};

fn cfg_at(tolerance: f64) -> GradCheckConfig {
    GradCheckConfig::with_tolerance(tolerance)
}

/// Gradient checks for every registered op at its contract tolerance
/// (1e-4, relaxed to 1e-3 for the correlation loss and spectral compositions).
pub fn op_suite() -> Result<Vec<GradReport>> {
    let mut reports = Vec::new();

    reports.push(grad_check("relu", &[vec![4, 4]], &cfg_at(1e-4), |t, xs| {
        Ok(t.relu(&xs[0]))
    })?);
    reports.push(grad_check("sigmoid", &[vec![3, 5]], &cfg_at(1e-4), |t, xs| {
        Ok(t.sigmoid(&xs[0]))
    })?);
    reports.push(grad_check("gelu", &[vec![3, 5]], &cfg_at(1e-4), |t, xs| {
        Ok(t.gelu(&xs[0]))
    })?);
    reports.push(grad_check(
        "matmul",
        &[vec![3, 4], vec![4, 5]],
        &cfg_at(1e-4),
        |t, xs| t.matmul(&xs[0], &xs[1]),
    )?);
    reports.push(grad_check(
        "linear",
        &[vec![4, 3], vec![3, 6], vec![6]],
        &cfg_at(1e-4),
        |t, xs| t.linear(&xs[0], &xs[1], &xs[2]),
    )?);

    reports.push(grad_check(
        "conv2d",
        &[vec![1, 2, 6, 6], vec![3, 2, 3, 3], vec![3]],
        &cfg_at(1e-4),
        |t, xs| {
            let p = ConvParams::new(xs[1].clone(), xs[2].clone(), 1, 1)?;
            conv2d(t, &xs[0], &p)
        },
    )?);
    reports.push(grad_check(
        "conv2d_1x1",
        &[vec![1, 3, 4, 4], vec![2, 3, 1, 1], vec![2]],
        &cfg_at(1e-4),
        |t, xs| {
            let p = ConvParams::new(xs[1].clone(), xs[2].clone(), 1, 0)?;
            conv2d(t, &xs[0], &p)
        },
    )?);
    reports.push(grad_check(
        "blurpool2d",
        &[vec![1, 2, 6, 6]],
        &cfg_at(1e-4),
        |t, xs| blurpool2d(t, &xs[0], &BlurKernel::default(), 2),
    )?);
    reports.push(grad_check(
        "bilinear_upsample",
        &[vec![1, 2, 4, 4]],
        &cfg_at(1e-4),
        |t, xs| bilinear_upsample(t, &xs[0], 4),
    )?);
    reports.push(grad_check(
        "ff_parser",
        &[vec![1, 2, 4, 4], vec![2, 4, 3]],
        &cfg_at(1e-3),
        |t, xs| {
            let f = SpectralFilter {
                weights: xs[1].clone(),
            };
            ff_parser(t, &xs[0], &f)
        },
    )?);

    let (tkn, d) = (3usize, 4usize);
    reports.push(grad_check(
        "mha",
        &[
            vec![2, tkn, d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d],
        ],
        &cfg_at(1e-4),
        |t, xs| {
            let p = AttentionParams::new(
                xs[1].clone(),
                xs[2].clone(),
                xs[3].clone(),
                xs[4].clone(),
                xs[5].clone(),
                xs[6].clone(),
                xs[7].clone(),
                xs[8].clone(),
                2,
            )?;
            mha(t, &xs[0], &p)
        },
    )?);
    reports.push(grad_check(
        "soft_argmax",
        &[vec![1, 2, 4, 5]],
        &cfg_at(1e-4),
        |t, xs| soft_argmax(t, &xs[0], 3.0),
    )?);
    reports.push(grad_check(
        "bce_heatmap_loss",
        &[vec![2, 6]],
        &cfg_at(1e-4),
        |t, xs| {
            let target =
                Tensor::new([2, 6], vec![0.1, 0.9, 0.4, 0.6, 0.0, 1.0, 0.2, 0.8, 0.5, 0.3, 0.7, 0.25])
                    .expect("sized");
            bce_heatmap_loss(t, &xs[0], &target)
        },
    )?);
    reports.push(grad_check(
        "l1_coord_loss",
        &[vec![2, 3, 2]],
        &cfg_at(1e-4),
        |t, xs| {
            let gt = Tensor::full([2, 3, 2], 2.0);
            l1_coord_loss(t, &xs[0], &gt)
        },
    )?);

    let dcfg = DccaConfig::default();
    reports.push(grad_check(
        "dcca_loss",
        &[vec![16, 8], vec![16, 8]],
        &cfg_at(1e-3),
        move |t, xs| {
            let v = ViewFeatures {
                h1: xs[0].clone(),
                h2: xs[1].clone(),
            };
            dcca_loss(t, &v, &dcfg)
        },
    )?);

    Ok(reports)
}

/// End-to-end check: analytic gradients of sum(logits) + sum(pooled) against
/// central differences for a random subset of network parameters.
pub fn network_param_check(seed: u64, coords: usize, tolerance: f64) -> Result<GradReport> {
    let cfg = NetworkConfig {
        input_h: 16,
        input_w: 16,
        landmarks: 3,
        base_channels: 4,
        hourglass_depth: 2,
        attention_heads: 2,
        feature_dim: 8,
    };
    let params = init_params(&cfg, seed)?;
    let mut rng = Rng::derive(seed, 0xe2e);
    let img = Tensor::rand_uniform([1, 3, 16, 16], 0.05, 0.95, &mut rng);

    // analytic
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let (logits, pooled) = forward(&mut tape, &img, &bound, &cfg)?;
    let a = tape.sum(&logits);
    let b = tape.sum(&pooled);
    let loss = tape.add(&a, &b)?;
    let grads = tape.backward(&loss)?;

    // numeric probe through the same scalar, re-running forward with one
    // parameter coordinate nudged
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    let flat_coords: Vec<(usize, usize)> = {
        let mut all = Vec::new();
        for (pi, (_, t)) in params.iter().enumerate() {
            for c in 0..t.numel() {
                all.push((pi, c));
            }
        }
        rng.shuffle(&mut all);
        all.truncate(coords);
        all
    };

    let mut worst = 0.0f64;
    for (pi, coord) in flat_coords {
        let name = &names[pi];
        let analytic = grads
            .get(bound.get(name).expect("bound"))
            .map(|g| g[coord])
            .unwrap_or(0.0);
        let probe = |delta: f64| -> Result<f64> {
            let mut shifted = params.clone();
            let t = shifted.get(name).expect("named").clone();
            let mut data = t.data().to_vec();
            data[coord] += delta;
            shifted.set(name, Tensor::new(t.shape().to_vec(), data)?)?;
            let mut tape = Tape::inference();
            let (logits, pooled) = forward(&mut tape, &img, &shifted, &cfg)?;
            Ok(logits.data().iter().sum::<f64>() + pooled.data().iter().sum::<f64>())
        };
        let h = 1e-5;
        let numeric = (probe(h)? - probe(-h)?) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(GradReport {
        op: "network(params)".into(),
        max_rel_err: vec![worst],
        tolerance,
    })
}

/// Everything: op suite plus the end-to-end network check at 3 seeds.
pub fn full_suite() -> Result<Vec<GradReport>> {
    let mut reports = op_suite()?;
    for seed in [1u64, 2, 3] {
        let mut r = network_param_check(seed, 50, 1e-3)?;
        r.op = format!("network(params) seed {seed}");
        reports.push(r);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn end_to_end_network_check_passes() {
        let r = network_param_check(1, 12, 1e-3).unwrap();
        assert!(r.passed(), "{r}");
    }
}
