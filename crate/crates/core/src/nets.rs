//! Network blocks shared by the stage-1 VAE, the conditional VAE and the
//! surrogate: a strided 1-D convolutional curve encoder and a transposed
//! convolutional curve decoder.

use diffcore::{
    Activation, BatchNorm, Conv1d, ConvTranspose1d, Crop, Ctx, Dropout, Linear, Module, ParamId, ParamStore, Reshape,
    Sequential, Var,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel plan of the curve encoder/decoder pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurveArch {
    /// Samples per curve.
    pub n: usize,
    /// Encoder channels, input channel first (one conv layer per step).
    pub enc_channels: Vec<usize>,
    pub enc_kernel: usize,
    /// Decoder channels after the dense input map; a final transposed
    /// convolution maps the last entry to the output channels.
    pub dec_channels: Vec<usize>,
    pub latent: usize,
    pub dropout: f64,
}

impl Default for CurveArch {
    fn default() -> Self {
        CurveArch {
            n: 1000,
            enc_channels: vec![1, 8, 16, 32, 32, 64],
            enc_kernel: 7,
            dec_channels: vec![64, 32, 16, 8],
            latent: 64,
            dropout: Dropout::DEFAULT_P,
        }
    }
}

impl CurveArch {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n >= 2
            && self.enc_channels.len() >= 2
            && self.enc_channels.iter().all(|&c| c > 0)
            && self.enc_kernel % 2 == 1
            && !self.dec_channels.is_empty()
            && self.dec_channels.iter().all(|&c| c > 0)
            && self.latent > 0
            && (0.0..1.0).contains(&self.dropout);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("bad network architecture {self:?}")))
        }
    }

    /// Length after the strided encoder convolutions.
    pub fn enc_out_len(&self) -> usize {
        let mut len = self.n;
        for _ in 1..self.enc_channels.len() {
            len = (len - 1) / 2 + 1;
        }
        len
    }

    /// Sequence length fed to the first transposed convolution; each one
    /// doubles it and the result is center-cropped to `n`.
    pub fn dec_seed_len(&self) -> usize {
        self.n.div_ceil(1 << self.dec_channels.len())
    }
}

/// Strided convolutional trunk with Gaussian heads: `[B, C, n] → (mu, logvar)`.
pub struct CurveEncoder {
    trunk: Sequential,
    pub mu: Linear,
    pub logvar: Linear,
    in_channels: usize,
    n: usize,
}

impl CurveEncoder {
    pub fn new(ps: &mut ParamStore, prefix: &str, arch: &CurveArch, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let mut trunk = Sequential::new();
        let k = arch.enc_kernel;
        for (i, w) in arch.enc_channels.windows(2).enumerate() {
            trunk.push(Conv1d::new(
                ps,
                &format!("{prefix}conv{i}"),
                w[0],
                w[1],
                k,
                2,
                k / 2,
                rng,
            )?);
            trunk.push(Activation::Relu);
        }
        let flat = arch.enc_channels.last().unwrap() * arch.enc_out_len();
        trunk.push(Reshape(vec![flat]));
        Ok(CurveEncoder {
            trunk,
            mu: Linear::new(ps, &format!("{prefix}mu"), flat, arch.latent, rng)?,
            logvar: Linear::new(ps, &format!("{prefix}logvar"), flat, arch.latent, rng)?,
            in_channels: arch.enc_channels[0],
            n: arch.n,
        })
    }

    pub fn features(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let shape = cx.graph.shape(x).to_vec();
        let x = if shape.len() == 2 {
            cx.graph
                .reshape(x, &[shape[0], self.in_channels, shape[1] / self.in_channels])?
        } else {
            x
        };
        if cx.graph.shape(x)[2] != self.n {
            return Err(Error::Invalid(format!(
                "encoder expects {} samples, got shape {:?}",
                self.n,
                cx.graph.shape(x)
            )));
        }
        Ok(self.trunk.forward(cx, x)?)
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<(Var, Var)> {
        let h = self.features(cx, x)?;
        Ok((self.mu.forward(cx, h)?, self.logvar.forward(cx, h)?))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.mean_param_ids();
        ids.extend(self.logvar.param_ids());
        ids
    }

    /// Parameters on the path to the mean only.
    pub fn mean_param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.trunk.param_ids();
        ids.extend(self.mu.param_ids());
        ids
    }
}

/// Dense map to a short sequence, then transposed convolutions with batch
/// norm, GELU and dropout: `[B, latent_in] → [B, out_channels, n]`.
pub struct CurveDecoder {
    seq: Sequential,
    out_channels: usize,
    n: usize,
}

impl CurveDecoder {
    pub fn new(
        ps: &mut ParamStore,
        prefix: &str,
        arch: &CurveArch,
        latent_in: usize,
        out_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        arch.validate()?;
        let seed_len = arch.dec_seed_len();
        let c0 = arch.dec_channels[0];
        let mut seq = Sequential::new();
        seq.push(Linear::new(
            ps,
            &format!("{prefix}input"),
            latent_in,
            c0 * seed_len,
            rng,
        )?);
        seq.push(Reshape(vec![c0, seed_len]));
        let mut chans = arch.dec_channels.clone();
        chans.push(out_channels);
        let last = chans.len() - 2;
        for (i, w) in chans.windows(2).enumerate() {
            seq.push(ConvTranspose1d::new(
                ps,
                &format!("{prefix}deconv{i}"),
                w[0],
                w[1],
                4,
                2,
                1,
                0,
                rng,
            )?);
            if i < last {
                seq.push(BatchNorm::new(ps, &format!("{prefix}bn{i}"), w[1])?);
                seq.push(Activation::Gelu);
                seq.push(Dropout::new(arch.dropout)?);
            }
        }
        let full = seed_len << arch.dec_channels.len();
        seq.push(Crop {
            start: (full - arch.n) / 2,
            len: arch.n,
        });
        Ok(CurveDecoder {
            seq,
            out_channels,
            n: arch.n,
        })
    }

    /// `[B, out_channels, n]`.
    pub fn forward(&self, cx: &mut Ctx<'_>, z: Var) -> Result<Var> {
        Ok(self.seq.forward(cx, z)?)
    }

    /// Single-channel decoders flattened to `[B, n]`.
    pub fn forward_flat(&self, cx: &mut Ctx<'_>, z: Var) -> Result<Var> {
        let y = self.forward(cx, z)?;
        let b = cx.graph.shape(y)[0];
        Ok(cx.graph.reshape(y, &[b, self.out_channels * self.n])?)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.seq.param_ids()
    }
}

/// Dense stack `dims[0] → … → dims[last]` with an activation after every
/// hidden layer.
pub struct Mlp {
    seq: Sequential,
}

impl Mlp {
    pub fn new(ps: &mut ParamStore, prefix: &str, dims: &[usize], act: Activation, rng: &mut impl Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config("dense stack needs at least two widths".into()));
        }
        let mut seq = Sequential::new();
        for (i, w) in dims.windows(2).enumerate() {
            seq.push(Linear::new(ps, &format!("{prefix}fc{i}"), w[0], w[1], rng)?);
            if i + 2 < dims.len() {
                seq.push(act);
            }
        }
        Ok(Mlp { seq })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        Ok(self.seq.forward(cx, x)?)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.seq.param_ids()
    }
}
