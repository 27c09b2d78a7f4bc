use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::lka::LkaConfig;
use crate::nn::{Activation, ConvGeometry};
use crate::random::Rng64;
use crate::tensor::Tensor;

use super::layers::{sample_macs, Bound, ConvLayer, LkaLayer, ParamStore, UpsamplerLayer};

/// Disparity maps emitted per image, finest first.
pub const DISPARITY_SCALES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct DepthNetConfig {
    /// Encoder widths at strides 2, 4, 8, 16.
    pub encoder: [usize; 4],
    /// Widths of the per-level 3x3 reductions, same order.
    pub decoder: [usize; 4],
    pub use_lka: bool,
    pub use_offset_upsampler: bool,
    pub lka: LkaConfig,
}

impl Default for DepthNetConfig {
    fn default() -> Self {
        Self {
            encoder: [16, 32, 64, 128],
            decoder: [8, 8, 16, 16],
            use_lka: true,
            use_offset_upsampler: true,
            lka: LkaConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Fuse {
    Lka(LkaLayer),
    Conv(ConvLayer),
}

#[derive(Debug, Clone, PartialEq)]
enum Upsample {
    Offset(UpsamplerLayer),
    Bilinear,
}

#[derive(Debug, Clone, PartialEq)]
struct Level {
    reduce: ConvLayer,
    /// Absent at the deepest level.
    up: Option<(Upsample, Fuse)>,
    head: Option<ConvLayer>,
    channels: usize,
}

/// Parameter tallies by role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParamReport {
    pub encoder: usize,
    /// Reductions and disparity heads.
    pub decoder: usize,
    /// LKA blocks, or the 3x3 fusion convs replacing them.
    pub fusion: usize,
    pub upsampler: usize,
}

impl ParamReport {
    pub fn total(&self) -> usize {
        self.encoder + self.decoder + self.fusion + self.upsampler
    }
}

/// Scratch encoder plus the attention decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthNet {
    pub config: DepthNetConfig,
    encoder: Vec<[ConvLayer; 2]>,
    levels: Vec<Level>,
    final_up: Upsample,
    final_head: ConvLayer,
}

impl DepthNet {
    pub fn new(config: DepthNetConfig) -> Result<Self> {
        if config.encoder.contains(&0) || config.decoder.contains(&0) {
            return Err(shape_err!("channel widths must be positive: {config:?}"));
        }
        let mut encoder = Vec::new();
        let mut in_c = 3;
        for (s, &c) in config.encoder.iter().enumerate() {
            let down = ConvLayer::same(format!("enc{}.conv1", s + 1), in_c, c, 3)
                .with_geometry(ConvGeometry::same(1, 1).with_stride(2));
            let keep = ConvLayer::same(format!("enc{}.conv2", s + 1), c, c, 3);
            encoder.push([down, keep]);
            in_c = c;
        }

        let make_up = |name: &str, c: usize| {
            if config.use_offset_upsampler {
                Upsample::Offset(UpsamplerLayer::new(name, c))
            } else {
                Upsample::Bilinear
            }
        };
        // levels are built deepest first, then stored finest first
        let mut levels = Vec::new();
        let mut below = 0;
        for s in (1..=4).rev() {
            let (enc_c, red_c) = (config.encoder[s - 1], config.decoder[s - 1]);
            let reduce = ConvLayer::same(format!("dec{s}.reduce"), enc_c, red_c, 3);
            let (up, channels) = if below == 0 {
                (None, red_c)
            } else {
                let c = red_c + below;
                let fuse = if config.use_lka {
                    Fuse::Lka(LkaLayer::new(&format!("dec{s}.lka"), c, config.lka))
                } else {
                    Fuse::Conv(ConvLayer::same(format!("dec{s}.fuse"), c, c, 3))
                };
                (Some((make_up(&format!("dec{s}.up"), below), fuse)), c)
            };
            let head = (s < 4).then(|| ConvLayer::same(format!("head{s}"), channels, 1, 3));
            levels.push(Level {
                reduce,
                up,
                head,
                channels,
            });
            below = channels;
        }
        levels.reverse();
        let top = levels[0].channels;
        Ok(Self {
            final_up: make_up("head0.up", top),
            final_head: ConvLayer::same("head0", top, 1, 3),
            config,
            encoder,
            levels,
        })
    }

    fn tagged_convs(&self) -> Vec<(&'static str, &ConvLayer)> {
        let mut out = Vec::new();
        for stage in &self.encoder {
            out.extend(stage.iter().map(|c| ("encoder", c)));
        }
        for level in self.levels.iter().rev() {
            out.push(("decoder", &level.reduce));
            if let Some((up, fuse)) = &level.up {
                if let Upsample::Offset(u) = up {
                    out.push(("upsampler", &u.proj));
                }
                match fuse {
                    Fuse::Lka(l) => out.extend(l.convs().map(|c| ("fusion", c))),
                    Fuse::Conv(c) => out.push(("fusion", c)),
                }
            }
            if let Some(h) = &level.head {
                out.push(("decoder", h));
            }
        }
        if let Upsample::Offset(u) = &self.final_up {
            out.push(("upsampler", &u.proj));
        }
        out.push(("decoder", &self.final_head));
        out
    }

    pub fn convs(&self) -> Vec<&ConvLayer> {
        self.tagged_convs().into_iter().map(|(_, c)| c).collect()
    }

    pub fn init_params(&self, rng: &mut Rng64) -> ParamStore {
        let mut store = ParamStore::new();
        for c in self.convs() {
            c.init(&mut store, rng);
        }
        store
    }

    pub fn param_report(&self) -> ParamReport {
        let mut r = ParamReport::default();
        for (tag, c) in self.tagged_convs() {
            let n = c.param_count();
            match tag {
                "encoder" => r.encoder += n,
                "decoder" => r.decoder += n,
                "fusion" => r.fusion += n,
                _ => r.upsampler += n,
            }
        }
        r
    }

    /// Approximate multiply-accumulates of one forward pass at `h x w`.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let at = |s: usize| (h >> s, w >> s);
        let mut total = 0;
        for (s, [down, keep]) in self.encoder.iter().enumerate() {
            let (ho, wo) = at(s + 1);
            total += down.macs(ho, wo) + keep.macs(ho, wo);
        }
        let up_macs = |up: &Upsample, c: usize, hi: usize, wi: usize| match up {
            Upsample::Offset(u) => u.proj.macs(hi, wi) + sample_macs(c, 2 * hi, 2 * wi),
            Upsample::Bilinear => sample_macs(c, 2 * hi, 2 * wi),
        };
        for (i, level) in self.levels.iter().enumerate() {
            let (ho, wo) = at(i + 1);
            total += level.reduce.macs(ho, wo);
            if let Some((up, fuse)) = &level.up {
                let below = self.levels[i + 1].channels;
                total += up_macs(up, below, ho / 2, wo / 2);
                total += match fuse {
                    Fuse::Lka(l) => l.macs(ho, wo),
                    Fuse::Conv(c) => c.macs(ho, wo),
                };
            }
            if let Some(hd) = &level.head {
                total += hd.macs(ho, wo);
            }
        }
        let (h1, w1) = at(1);
        total + up_macs(&self.final_up, self.levels[0].channels, h1, w1) + self.final_head.macs(h, w)
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        match shape {
            [3, h, w] if h % 16 == 0 && w % 16 == 0 && *h > 0 && *w > 0 => Ok(()),
            _ => Err(shape_err!("depth net needs [3,H,W] with H, W divisible by 16, got {shape:?}")),
        }
    }

    /// Feature maps at strides 2, 4, 8, 16.
    pub fn encoder_forward(&self, tape: &mut Tape, bound: &Bound, image: Var) -> Result<Vec<Var>> {
        self.check_input(tape.shape(image))?;
        let mut x = image;
        let mut feats = Vec::with_capacity(4);
        for [down, keep] in &self.encoder {
            x = down.forward(tape, bound, x)?;
            x = tape.activation(x, Activation::Elu)?;
            x = keep.forward(tape, bound, x)?;
            x = tape.activation(x, Activation::Elu)?;
            feats.push(x);
        }
        Ok(feats)
    }

    fn upsample(&self, tape: &mut Tape, bound: &Bound, up: &Upsample, x: Var) -> Result<Var> {
        match up {
            Upsample::Offset(u) => tape.offset_upsample(x, &u.vars(bound)?),
            Upsample::Bilinear => tape.bilinear_resize(x, 2),
        }
    }

    /// Disparities in (0,1) at scales 0..4, scale `s` being `H/2^s x W/2^s`.
    pub fn decoder_forward(&self, tape: &mut Tape, bound: &Bound, feats: &[Var]) -> Result<Vec<Var>> {
        if feats.len() != 4 {
            return Err(shape_err!("decoder needs 4 feature levels, got {}", feats.len()));
        }
        let mut disps = vec![None; DISPARITY_SCALES];
        let mut x: Option<Var> = None;
        for (i, level) in self.levels.iter().enumerate().rev() {
            let r = level.reduce.forward(tape, bound, feats[i])?;
            let r = tape.activation(r, Activation::Elu)?;
            let next = match (&level.up, x) {
                (Some((up, fuse)), Some(deeper)) => {
                    let u = self.upsample(tape, bound, up, deeper)?;
                    let cat = tape.concat_channels(r, u)?;
                    match fuse {
                        Fuse::Lka(l) => tape.lka(cat, &l.vars(bound)?)?,
                        Fuse::Conv(c) => {
                            let y = c.forward(tape, bound, cat)?;
                            tape.activation(y, Activation::Elu)?
                        }
                    }
                }
                _ => r,
            };
            if let Some(head) = &level.head {
                let d = head.forward(tape, bound, next)?;
                disps[i + 1] = Some(tape.activation(d, Activation::Sigmoid)?);
            }
            x = Some(next);
        }
        let top = self.upsample(tape, bound, &self.final_up, x.expect("four levels"))?;
        let d = self.final_head.forward(tape, bound, top)?;
        disps[0] = Some(tape.activation(d, Activation::Sigmoid)?);
        Ok(disps.into_iter().map(|d| d.expect("every scale filled")).collect())
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, image: Var) -> Result<Vec<Var>> {
        let feats = self.encoder_forward(tape, bound, image)?;
        self.decoder_forward(tape, bound, &feats)
    }

    /// Inference without gradients; returns the disparity pyramid.
    pub fn predict(&self, params: &ParamStore, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let disps = self.forward(&mut tape, &bound, x)?;
        Ok(disps.into_iter().map(|d| tape.value(d).clone()).collect())
    }
}
