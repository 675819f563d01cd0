//! Multi-scale fusion conditioner.
//!
//! Parallel feature streams at full, half, and quarter resolution, with a
//! per-stage exchange where every stream receives resampled contributions
//! from every other stream through 1×1 mixing. The full-resolution stream
//! also projects to a single-channel logistic map used by the spatial
//! coherence loss and exposed alongside the per-scale features.

use crate::nn::params::{Init, ModelParams, SegmentBuilder};
use crate::nn::tape::{NodeId, Tape};
use crate::nn::NetConfig;

pub struct MfcmNodes {
    /// Final stream features, index = scale (0 is full resolution).
    pub scales: Vec<NodeId>,
    /// Single-channel logistic projection of the full-resolution stream.
    pub scc: NodeId,
}

pub fn register(b: &mut SegmentBuilder, cfg: &NetConfig) {
    let c = cfg.cond_channels;
    for i in 0..cfg.scales {
        b.register(format!("mfcm.stem{i}.w"), 9 * c, Init::Uniform { fan_in: 9 });
        b.register(format!("mfcm.stem{i}.b"), c, Init::Zero);
    }
    for st in 0..cfg.cond_stages {
        for i in 0..cfg.scales {
            b.register(format!("mfcm.s{st}.conv{i}.w"), 9 * c * c, Init::Uniform { fan_in: 9 * c });
            b.register(format!("mfcm.s{st}.conv{i}.b"), c, Init::Zero);
        }
        for tgt in 0..cfg.scales {
            for src in 0..cfg.scales {
                b.register(
                    format!("mfcm.s{st}.mix{src}to{tgt}.w"),
                    c * c,
                    Init::Uniform { fan_in: c },
                );
                b.register(format!("mfcm.s{st}.mix{src}to{tgt}.b"), c, Init::Zero);
            }
        }
    }
    b.register("mfcm.scc.w", cfg.cond_channels, Init::Zero);
    b.register("mfcm.scc.b", 1, Init::Zero);
}

/// Runs the conditioner on a single-channel image node.
///
/// `fuse = false` disables the cross-resolution exchange (the plain
/// conditioner ablation); streams then evolve independently.
pub fn forward(
    tape: &mut Tape,
    params: &ModelParams,
    cfg: &NetConfig,
    image: NodeId,
    fuse: bool,
) -> MfcmNodes {
    let c = cfg.cond_channels;
    let (ic, h, w) = tape.value(image).shape();
    assert_eq!(ic, 1, "conditioner expects a single-channel image");
    let factor = 1usize << (cfg.scales - 1);
    assert!(
        h % factor == 0 && w % factor == 0,
        "image dims {h}x{w} must be divisible by {factor} for {} scales",
        cfg.scales
    );

    // per-scale stems on progressively pooled copies of the image
    let mut streams = Vec::with_capacity(cfg.scales);
    let mut pooled = image;
    for i in 0..cfg.scales {
        if i > 0 {
            pooled = tape.avgpool2(pooled);
        }
        let conv = tape.conv3x3(
            pooled,
            params.seg(&format!("mfcm.stem{i}.w")),
            params.seg(&format!("mfcm.stem{i}.b")),
            c,
        );
        streams.push(tape.silu(conv));
    }

    for st in 0..cfg.cond_stages {
        let convs: Vec<NodeId> = (0..cfg.scales)
            .map(|i| {
                let y = tape.conv3x3(
                    streams[i],
                    params.seg(&format!("mfcm.s{st}.conv{i}.w")),
                    params.seg(&format!("mfcm.s{st}.conv{i}.b")),
                    c,
                );
                tape.silu(y)
            })
            .collect();
        if !fuse {
            streams = convs;
            continue;
        }
        streams = (0..cfg.scales)
            .map(|tgt| {
                let mixed: Vec<(NodeId, f64)> = (0..cfg.scales)
                    .map(|src| {
                        let resampled = resample(tape, convs[src], src, tgt);
                        let m = tape.conv1x1(
                            resampled,
                            params.seg(&format!("mfcm.s{st}.mix{src}to{tgt}.w")),
                            params.seg(&format!("mfcm.s{st}.mix{src}to{tgt}.b")),
                            c,
                        );
                        (m, 1.0)
                    })
                    .collect();
                let summed = tape.lincomb(mixed);
                tape.silu(summed)
            })
            .collect();
    }

    let scc_pre = tape.conv1x1(streams[0], params.seg("mfcm.scc.w"), params.seg("mfcm.scc.b"), 1);
    let scc = tape.sigmoid(scc_pre);
    MfcmNodes { scales: streams, scc }
}

/// Moves a stream feature from scale `src` to scale `tgt` (scale k lives at
/// 1/2^k resolution): pooling downward, bilinear upsampling upward.
fn resample(tape: &mut Tape, node: NodeId, src: usize, tgt: usize) -> NodeId {
    let mut cur = node;
    if src < tgt {
        for _ in src..tgt {
            cur = tape.avgpool2(cur);
        }
    } else {
        for _ in tgt..src {
            cur = tape.bilinear_up2(cur);
        }
    }
    cur
}
