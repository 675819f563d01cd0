//! Twin noise-estimation branches.
//!
//! Each branch is a small conditioned encoder-decoder over the noisy mask:
//! the input is concatenated with the full-resolution conditioning features,
//! every block adds a learned time bias, conditioning features modulate the
//! matching scale through a channelwise gate (or true cross-attention at the
//! coarsest scale when enabled), and a single-head self-attention block sits
//! at the coarsest resolution. The two branches own disjoint parameter
//! segments under the `gnem.` and `bnem.` prefixes; only the conditioner
//! (`mfcm.`) is shared.

use crate::nn::params::{Init, ModelParams, SegmentBuilder};
use crate::nn::tape::{NodeId, Tape};
use crate::nn::NetConfig;

pub const GAUSSIAN_PREFIX: &str = "gnem";
pub const BERNOULLI_PREFIX: &str = "bnem";

pub fn register(b: &mut SegmentBuilder, cfg: &NetConfig, prefix: &str) {
    let (cb, cm, cc, td) = (cfg.base_channels, cfg.mid_channels, cfg.cond_channels, cfg.time_dim);
    let conv = |b: &mut SegmentBuilder, name: String, c_in: usize, c_out: usize| {
        b.register(format!("{name}.w"), 9 * c_in * c_out, Init::Uniform { fan_in: 9 * c_in });
        b.register(format!("{name}.b"), c_out, Init::Zero);
    };
    let tbias = |b: &mut SegmentBuilder, name: String, c: usize| {
        b.register(format!("{name}.time.w"), c * td, Init::Uniform { fan_in: td });
        b.register(format!("{name}.time.b"), c, Init::Zero);
    };
    let gate = |b: &mut SegmentBuilder, name: String, c: usize| {
        b.register(format!("{name}.w"), c * cc, Init::Uniform { fan_in: cc });
        b.register(format!("{name}.b"), c, Init::Zero);
    };

    conv(b, format!("{prefix}.stem"), 1 + cc, cb);
    tbias(b, format!("{prefix}.stem"), cb);
    gate(b, format!("{prefix}.gate0"), cb);

    conv(b, format!("{prefix}.enc1"), cb, cm);
    tbias(b, format!("{prefix}.enc1"), cm);
    gate(b, format!("{prefix}.gate1"), cm);

    conv(b, format!("{prefix}.enc2"), cm, cm);
    tbias(b, format!("{prefix}.enc2"), cm);
    if cfg.cross_attention {
        b.register(format!("{prefix}.xattn.wq"), cm * cm, Init::Uniform { fan_in: cm });
        b.register(format!("{prefix}.xattn.wk"), cm * cc, Init::Uniform { fan_in: cc });
        b.register(format!("{prefix}.xattn.wv"), cm * cc, Init::Uniform { fan_in: cc });
        b.register(format!("{prefix}.xattn.wo"), cm * cm, Init::Zero);
    } else {
        gate(b, format!("{prefix}.gate2"), cm);
    }

    b.register(format!("{prefix}.attn.wq"), cm * cm, Init::Uniform { fan_in: cm });
    b.register(format!("{prefix}.attn.wk"), cm * cm, Init::Uniform { fan_in: cm });
    b.register(format!("{prefix}.attn.wv"), cm * cm, Init::Uniform { fan_in: cm });
    b.register(format!("{prefix}.attn.wo"), cm * cm, Init::Zero);

    conv(b, format!("{prefix}.mid"), cm, cm);
    tbias(b, format!("{prefix}.mid"), cm);

    conv(b, format!("{prefix}.dec1"), 2 * cm, cb);
    tbias(b, format!("{prefix}.dec1"), cb);

    conv(b, format!("{prefix}.dec0"), 2 * cb, cb);
    tbias(b, format!("{prefix}.dec0"), cb);

    b.register(format!("{prefix}.head.w"), cb, Init::Zero);
    b.register(format!("{prefix}.head.b"), 1, Init::Zero);
    // time-modulated residual from the noisy input straight to the head;
    // lets the branch express identity-plus-correction predictions without
    // routing the input through the whole stack
    b.register(format!("{prefix}.skip.w"), td, Init::Zero);
    b.register(format!("{prefix}.skip.b"), 1, Init::Zero);
}

/// Runs one branch and returns the single-channel linear head output.
/// The Bernoulli branch squashes it downstream; the Gaussian branch uses
/// it directly as the noise estimate.
pub fn forward(
    tape: &mut Tape,
    params: &ModelParams,
    cfg: &NetConfig,
    prefix: &str,
    noisy: NodeId,
    cond_scales: &[NodeId],
    emb: &[f64],
) -> NodeId {
    let (cb, cm) = (cfg.base_channels, cfg.mid_channels);
    assert!(!cond_scales.is_empty(), "denoiser needs conditioning features");
    let (nc, h, w) = tape.value(noisy).shape();
    assert_eq!(nc, 1, "denoiser expects a single-channel noisy mask");
    assert!(h % 4 == 0 && w % 4 == 0, "mask dims {h}x{w} must be divisible by 4");
    let (fc, fh, fw) = tape.value(cond_scales[0]).shape();
    assert_eq!(fc, cfg.cond_channels, "conditioning channel mismatch");
    assert_eq!((fh, fw), (h, w), "conditioning resolution mismatch");

    let seg = |name: String| params.seg(&name);
    let cond_at = |k: usize| cond_scales[k.min(cond_scales.len() - 1)];

    let block = |tape: &mut Tape, x: NodeId, name: String, c_out: usize| {
        let y = tape.conv3x3(x, seg(format!("{name}.w")), seg(format!("{name}.b")), c_out);
        let y = tape.time_bias(y, seg(format!("{name}.time.w")), seg(format!("{name}.time.b")), emb);
        tape.silu(y)
    };
    let gated = |tape: &mut Tape, x: NodeId, name: String, c: usize, cond: NodeId| {
        let g_pre = tape.conv1x1(cond, seg(format!("{name}.w")), seg(format!("{name}.b")), c);
        let g = tape.sigmoid(g_pre);
        tape.mul(x, g)
    };

    let cat_in = tape.concat_c(noisy, cond_scales[0]);
    let e0 = block(tape, cat_in, format!("{prefix}.stem"), cb);
    let g0 = gated(tape, e0, format!("{prefix}.gate0"), cb, cond_at(0));

    let d1 = tape.avgpool2(g0);
    let e1 = block(tape, d1, format!("{prefix}.enc1"), cm);
    let g1 = gated(tape, e1, format!("{prefix}.gate1"), cm, cond_at(1));

    let d2 = tape.avgpool2(g1);
    let e2 = block(tape, d2, format!("{prefix}.enc2"), cm);
    let g2 = if cfg.cross_attention {
        tape.cross_attention(
            e2,
            cond_at(2),
            seg(format!("{prefix}.xattn.wq")),
            seg(format!("{prefix}.xattn.wk")),
            seg(format!("{prefix}.xattn.wv")),
            seg(format!("{prefix}.xattn.wo")),
        )
    } else {
        gated(tape, e2, format!("{prefix}.gate2"), cm, cond_at(2))
    };

    let attn = tape.self_attention(
        g2,
        seg(format!("{prefix}.attn.wq")),
        seg(format!("{prefix}.attn.wk")),
        seg(format!("{prefix}.attn.wv")),
        seg(format!("{prefix}.attn.wo")),
    );
    let mid = block(tape, attn, format!("{prefix}.mid"), cm);

    let u1 = tape.bilinear_up2(mid);
    let c1 = tape.concat_c(u1, g1);
    let dec1 = block(tape, c1, format!("{prefix}.dec1"), cb);

    let u0 = tape.bilinear_up2(dec1);
    let c0 = tape.concat_c(u0, g0);
    let dec0 = block(tape, c0, format!("{prefix}.dec0"), cb);

    let head = tape.conv1x1(dec0, seg(format!("{prefix}.head.w")), seg(format!("{prefix}.head.b")), 1);
    let skip = tape.time_scale(
        noisy,
        seg(format!("{prefix}.skip.w")),
        seg(format!("{prefix}.skip.b")),
        emb,
    );
    tape.lincomb(vec![(head, 1.0), (skip, 1.0)])
}
