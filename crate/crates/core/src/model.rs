//! The dual-branch reconstruction network.
//!
//! Time branch: cross-modal RWKV over each node's window, a dilated causal
//! TCN, an MLP reduction, fused GAT/GCN aggregation per timestep, and a
//! dense/batch-norm decoder. Frequency branch: per-modality MLP over the
//! amplitude‖phase matrix, cross-modal RWKV, a plain RWKV block, fused
//! PPNP/GAT aggregation, and an MLP-RWKV-MLP decoder.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{spatial_registry, Fusion, GraphOps, SpatialLayer};
use crate::nn::{init_uniform, BatchNorm, LayerNorm, Linear, ParamStore, Session};
use crate::rwkv::{CfeBlock, ChannelMixing, RwkvBlock, TimeMixing};
use crate::spectral::freq_matrix;
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Cross-modal RWKV output width per modality.
    pub cfe_width: usize,
    /// Apply every key projection to the modality's own input slice.
    pub cfe_shared_input: bool,
    pub tcn_channels: Vec<usize>,
    pub tcn_kernel: usize,
    pub tcn_dilations: Vec<usize>,
    pub mlp_width: usize,
    pub freq_d1: usize,
    pub freq_d2: usize,
    pub freq_d3: usize,
    pub d_enc: usize,
    pub decoder_width: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub bn_momentum: f64,
    pub ppnp_alpha: f64,
    /// Divide DFT amplitudes by the window length before they enter the
    /// frequency branch (its target uses the same scale).
    pub normalize_amplitude: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            cfe_width: 32,
            cfe_shared_input: false,
            tcn_channels: vec![32, 32, 32],
            tcn_kernel: 3,
            tcn_dilations: vec![1, 2, 4],
            mlp_width: 16,
            freq_d1: 32,
            freq_d2: 32,
            freq_d3: 16,
            d_enc: 16,
            decoder_width: 32,
            dropout: 0.1,
            leaky_slope: 0.01,
            bn_momentum: 0.9,
            ppnp_alpha: 0.1,
            normalize_amplitude: true,
        }
    }
}

/// Structural switches used by the ablation schemes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub cfe: bool,
    pub time_branch: bool,
    pub freq_branch: bool,
    /// Spatial layers of the time branch; two entries are fused.
    pub time_spatial: Vec<String>,
    pub freq_spatial: Vec<String>,
    /// Build the adjacency from time-domain correlation only.
    pub time_only_graph: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            cfe: true,
            time_branch: true,
            freq_branch: true,
            time_spatial: vec!["gat".into(), "gcn".into()],
            freq_spatial: vec!["ppnp".into(), "gat".into()],
            time_only_graph: false,
        }
    }
}

/// Per-modality (block-diagonal) projection without bias.
#[derive(Clone, Debug)]
struct ModalityMlp {
    name: String,
    modalities: usize,
    d_in: usize,
}

impl ModalityMlp {
    fn new(store: &mut ParamStore, name: &str, modalities: usize, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        for i in 0..modalities {
            store.add(format!("{}.m{}.weight", name, i), init_uniform(&[d_in, d_out], d_in, rng))?;
        }
        Ok(Self {
            name: name.to_owned(),
            modalities,
            d_in,
        })
    }

    fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let axis = x.shape().len() - 1;
        let parts: Vec<Var<'t>> = (0..self.modalities)
            .map(|i| x.slice(axis, i * self.d_in, self.d_in)?.matmul(s.p(&format!("{}.m{}.weight", self.name, i))?))
            .collect::<Result<_>>()?;
        Var::concat(&parts, axis)?.relu()
    }
}

/// Dilated causal convolution with a residual path: `relu(conv(x) + P x)`.
#[derive(Clone, Debug)]
pub struct TcnBlock {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl TcnBlock {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, kernel: usize, dilation: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if kernel == 0 || dilation == 0 {
            return Err(Error::InvalidArgument("TCN kernel and dilation must be positive".into()));
        }
        let fan_in = kernel * c_in;
        store.add(format!("{}.weight", name), init_uniform(&[fan_in, c_out], fan_in, rng))?;
        store.add(format!("{}.bias", name), init_uniform(&[c_out], fan_in, rng))?;
        if c_in != c_out {
            store.add(format!("{}.proj", name), init_uniform(&[c_in, c_out], c_in, rng))?;
        }
        Ok(Self {
            name: name.to_owned(),
            c_in,
            c_out,
            kernel,
            dilation,
        })
    }

    /// `x` is `[..., T, c_in]`; tap `j` reads `x(t − j·dilation)`.
    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let rank = x.shape().len();
        let taps: Vec<Var<'t>> = (0..self.kernel)
            .map(|j| if j == 0 { Ok(x) } else { x.shift(rank - 2, j * self.dilation) })
            .collect::<Result<_>>()?;
        let y = Var::concat(&taps, rank - 1)?
            .matmul(s.p(&format!("{}.weight", self.name))?)?
            .add(s.p(&format!("{}.bias", self.name))?)?;
        let residual = if self.c_in == self.c_out {
            x
        } else {
            x.matmul(s.p(&format!("{}.proj", self.name))?)?
        };
        y.add(residual)?.relu()
    }
}

/// Either one spatial layer or two fused by a learned gate.
struct SpatialStage {
    layers: Vec<Box<dyn SpatialLayer>>,
    fusion: Option<Fusion>,
}

impl SpatialStage {
    fn new(store: &mut ParamStore, name: &str, kinds: &[String], d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if kinds.is_empty() || kinds.len() > 2 {
            return Err(Error::InvalidArgument(format!("spatial stage takes one or two layers, got {}", kinds.len())));
        }
        let reg = spatial_registry();
        let layers = kinds
            .iter()
            .enumerate()
            .map(|(i, k)| (reg.get(k)?)(store, &format!("{}.{}{}", name, k, i), d_in, d_out, rng))
            .collect::<Result<Vec<_>>>()?;
        let fusion = if layers.len() == 2 {
            Some(Fusion::new(store, &format!("{}.fusion", name))?)
        } else {
            None
        };
        Ok(Self { layers, fusion })
    }

    /// `h` is `[G, N, d_in]`.
    fn forward<'t>(&self, s: &Session<'t>, g: &GraphOps, h: Var<'t>) -> Result<Var<'t>> {
        let a = self.layers[0].forward(s, g, h)?;
        match &self.fusion {
            Some(f) => f.forward(s, a, self.layers[1].forward(s, g, h)?),
            None => Ok(a),
        }
    }
}

/// `[B, N, T, F]` to `[B·T, N, F]` and back, so graph layers see one graph
/// per (sample, timestep).
fn nodes_last<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let sh = x.shape();
    x.permute(&[0, 2, 1, 3])?.reshape(&[sh[0] * sh[2], sh[1], sh[3]])
}

fn nodes_back<'t>(x: Var<'t>, b: usize, t: usize) -> Result<Var<'t>> {
    let sh = x.shape();
    x.reshape(&[b, t, sh[1], sh[2]])?.permute(&[0, 2, 1, 3])
}

enum TemporalMixer {
    Cfe(CfeBlock),
    Plain(TimeMixing),
}

impl TemporalMixer {
    fn new(store: &mut ParamStore, name: &str, cross_modal: bool, modalities: usize, d_in: usize, d_out: usize, shared: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        if cross_modal {
            Ok(Self::Cfe(CfeBlock::new(store, &format!("{}.cfe", name), &vec![d_in; modalities], d_out, shared, rng)?))
        } else {
            Ok(Self::Plain(TimeMixing::new(store, &format!("{}.mix", name), modalities * d_in, modalities * d_out, rng)?))
        }
    }

    fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            Self::Cfe(c) => c.forward(s, x),
            Self::Plain(t) => t.forward(s, x),
        }
    }
}

struct TimeBranch {
    mixer: TemporalMixer,
    mix_norm: LayerNorm,
    channel: ChannelMixing,
    tcn: Vec<TcnBlock>,
    mlp: Linear,
    spatial: SpatialStage,
    dec_in: Linear,
    dec_norm: BatchNorm,
    dec_out: Linear,
}

struct FreqBranch {
    mlp: ModalityMlp,
    mixer: TemporalMixer,
    residual: bool,
    mix_norm: LayerNorm,
    channel: ChannelMixing,
    proj: Linear,
    block: RwkvBlock,
    spatial: SpatialStage,
    dec_in: Linear,
    dec_block: RwkvBlock,
    dec_out: Linear,
}

/// Reconstructions from one forward pass; a disabled branch yields `None`.
pub struct Output<'t> {
    pub time: Option<Var<'t>>,
    pub freq: Option<Var<'t>>,
    /// Frequency matrix of the input (`[B, N, 2W, M]`), amplitudes divided
    /// by `amplitude_scale`.
    pub freq_input: Tensor,
    pub amplitude_scale: f64,
}

pub struct Model {
    pub config: ModelConfig,
    pub ablation: Ablation,
    pub modalities: usize,
    time: Option<TimeBranch>,
    freq: Option<FreqBranch>,
}

impl Model {
    /// Registers every parameter in `store` (seeded, deterministic order).
    pub fn new(store: &mut ParamStore, config: &ModelConfig, ablation: &Ablation, modalities: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if !ablation.time_branch && !ablation.freq_branch {
            return Err(Error::InvalidArgument("at least one branch must be enabled".into()));
        }
        if ablation.cfe && modalities < 2 {
            return Err(Error::CfeNeedsModalities);
        }
        if config.tcn_channels.len() != config.tcn_dilations.len() {
            return Err(Error::InvalidArgument("tcn_channels and tcn_dilations differ in length".into()));
        }
        let m = modalities;
        let c = config;
        let time = if ablation.time_branch {
            let width = m * c.cfe_width;
            let mixer = TemporalMixer::new(store, "time", ablation.cfe, m, 1, c.cfe_width, c.cfe_shared_input, rng)?;
            let mix_norm = LayerNorm::new(store, "time.ln", width)?;
            let channel = ChannelMixing::new(store, "time.channel", width, width, rng)?;
            let mut tcn = Vec::new();
            let mut c_in = width;
            for (i, (&c_out, &dil)) in c.tcn_channels.iter().zip(&c.tcn_dilations).enumerate() {
                tcn.push(TcnBlock::new(store, &format!("time.tcn{}", i), c_in, c_out, c.tcn_kernel, dil, rng)?);
                c_in = c_out;
            }
            let mlp = Linear::new(store, "time.mlp", c_in, c.mlp_width, true, rng)?;
            let spatial = SpatialStage::new(store, "time.spatial", &ablation.time_spatial, c.mlp_width, c.d_enc, rng)?;
            Some(TimeBranch {
                mixer,
                mix_norm,
                channel,
                tcn,
                mlp,
                spatial,
                dec_in: Linear::new(store, "time.dec_in", c.d_enc, c.decoder_width, true, rng)?,
                dec_norm: BatchNorm::new(store, "time.dec_bn", c.decoder_width, c.bn_momentum)?,
                dec_out: Linear::new(store, "time.dec_out", c.decoder_width, m, true, rng)?,
            })
        } else {
            None
        };
        let freq = if ablation.freq_branch {
            let mlp = ModalityMlp::new(store, "freq.mlp", m, 1, c.freq_d1, rng)?;
            let mixer = TemporalMixer::new(store, "freq", ablation.cfe, m, c.freq_d1, c.freq_d2, c.cfe_shared_input, rng)?;
            let width = m * c.freq_d2;
            Some(FreqBranch {
                mlp,
                mixer,
                residual: c.freq_d1 == c.freq_d2,
                mix_norm: LayerNorm::new(store, "freq.ln", width)?,
                channel: ChannelMixing::new(store, "freq.channel", width, width, rng)?,
                proj: Linear::new(store, "freq.proj", width, c.freq_d3, true, rng)?,
                block: RwkvBlock::new(store, "freq.rwkv", c.freq_d3, rng)?,
                spatial: SpatialStage::new(store, "freq.spatial", &ablation.freq_spatial, c.freq_d3, c.d_enc, rng)?,
                dec_in: Linear::new(store, "freq.dec_in", c.d_enc, c.decoder_width, true, rng)?,
                dec_block: RwkvBlock::new(store, "freq.dec_rwkv", c.decoder_width, rng)?,
                dec_out: Linear::new(store, "freq.dec_out", c.decoder_width, m, true, rng)?,
            })
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            ablation: ablation.clone(),
            modalities,
            time,
            freq,
        })
    }

    fn check_input(&self, x: &Tensor, g: &GraphOps) -> Result<(usize, usize, usize)> {
        match *x.shape() {
            [b, n, w, m] if m == self.modalities && n == g.n && w >= 2 => Ok((b, n, w)),
            ref s => Err(Error::InvalidShape {
                op: "model.forward",
                detail: format!("expected [B, {}, W≥2, {}], got {:?}", g.n, self.modalities, s),
            }),
        }
    }

    /// Latent `[B, N, W, d_enc]` of the time branch.
    pub fn time_encode<'t>(&self, s: &Session<'t>, g: &GraphOps, x: Var<'t>) -> Result<Var<'t>> {
        let tb = self.time.as_ref().ok_or_else(|| Error::InvalidArgument("time branch disabled".into()))?;
        let sh = x.shape();
        let (b, n, w, m) = (sh[0], sh[1], sh[2], sh[3]);
        let seq = x.reshape(&[b * n, w, m])?;
        let h = tb.mixer.forward(s, seq)?;
        let mut h = h.add(tb.channel.forward(s, tb.mix_norm.forward(s, h)?)?)?;
        for block in &tb.tcn {
            h = block.forward(s, h)?;
        }
        let h = tb.mlp.forward(s, h)?.relu()?;
        let f = h.shape()[2];
        let graphs = nodes_last(h.reshape(&[b, n, w, f])?)?;
        nodes_back(tb.spatial.forward(s, g, graphs)?, b, w)
    }

    pub fn time_decode<'t>(&self, s: &Session<'t>, latent: Var<'t>) -> Result<Var<'t>> {
        let tb = self.time.as_ref().ok_or_else(|| Error::InvalidArgument("time branch disabled".into()))?;
        let batch = latent.shape()[0];
        let h = tb.dec_in.forward(s, latent)?;
        let h = tb.dec_norm.forward(s, h, batch)?;
        let h = s.dropout(h, self.config.dropout)?.leaky_relu(self.config.leaky_slope)?;
        tb.dec_out.forward(s, h)
    }

    /// Latent `[B, N, 2W, d_enc]` of the frequency branch.
    pub fn freq_encode<'t>(&self, s: &Session<'t>, g: &GraphOps, xf: Var<'t>) -> Result<Var<'t>> {
        let fb = self.freq.as_ref().ok_or_else(|| Error::InvalidArgument("frequency branch disabled".into()))?;
        let sh = xf.shape();
        let (b, n, w2, m) = (sh[0], sh[1], sh[2], sh[3]);
        let seq = xf.reshape(&[b * n, w2, m])?;
        let h = fb.mlp.forward(s, seq)?;
        let mixed = fb.mixer.forward(s, h)?;
        let h = if fb.residual { h.add(mixed)? } else { mixed };
        let h = h.add(fb.channel.forward(s, fb.mix_norm.forward(s, h)?)?)?;
        let h = fb.block.forward(s, fb.proj.forward(s, h)?)?;
        let f = h.shape()[2];
        let graphs = nodes_last(h.reshape(&[b, n, w2, f])?)?;
        nodes_back(fb.spatial.forward(s, g, graphs)?, b, w2)
    }

    pub fn freq_decode<'t>(&self, s: &Session<'t>, latent: Var<'t>) -> Result<Var<'t>> {
        let fb = self.freq.as_ref().ok_or_else(|| Error::InvalidArgument("frequency branch disabled".into()))?;
        let sh = latent.shape();
        let (b, n, w2, d) = (sh[0], sh[1], sh[2], sh[3]);
        let h = fb.dec_in.forward(s, latent.reshape(&[b * n, w2, d])?)?.relu()?;
        let h = fb.dec_block.forward(s, h)?;
        fb.dec_out.forward(s, h)?.reshape(&[b, n, w2, self.modalities])
    }

    /// Reconstructs a batch `[B, N, W, M]` of preprocessed windows.
    pub fn forward<'t>(&self, s: &Session<'t>, g: &GraphOps, x: &Tensor) -> Result<Output<'t>> {
        self.check_input(x, g)?;
        let w = x.shape()[2];
        let amplitude_scale = if self.config.normalize_amplitude { w as f64 } else { 1.0 };
        let mut freq_input = freq_matrix(x)?;
        if amplitude_scale != 1.0 {
            scale_amplitudes(&mut freq_input, 1.0 / amplitude_scale);
        }
        let time = match self.time {
            Some(_) => {
                let xv = s.constant(x.clone());
                Some(self.time_decode(s, self.time_encode(s, g, xv)?)?)
            }
            None => None,
        };
        let freq = match self.freq {
            Some(_) => {
                let xf = s.constant(freq_input.clone());
                Some(self.freq_decode(s, self.freq_encode(s, g, xf)?)?)
            }
            None => None,
        };
        Ok(Output {
            time,
            freq,
            freq_input,
            amplitude_scale,
        })
    }
}

/// Multiplies the amplitude half of a `[B, N, 2W, M]` frequency matrix by `c`.
pub fn scale_amplitudes(f: &mut Tensor, c: f64) {
    let sh = f.shape().to_vec();
    let (w2, m) = (sh[2], sh[3]);
    for (i, v) in f.data_mut().iter_mut().enumerate() {
        if (i / m) % w2 < w2 / 2 {
            *v *= c;
        }
    }
}

/// One row of the parameter inventory.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Description {
    pub total_parameters: usize,
    pub cross_modal: bool,
    pub time_branch: bool,
    pub freq_branch: bool,
    pub time_spatial: Vec<String>,
    pub freq_spatial: Vec<String>,
    pub params: Vec<ParamInfo>,
}

pub fn describe(model: &Model, store: &ParamStore) -> Description {
    let params: Vec<ParamInfo> = store
        .params()
        .map(|(name, t)| ParamInfo {
            name: name.to_owned(),
            shape: t.shape().to_vec(),
            count: t.numel(),
        })
        .collect();
    Description {
        total_parameters: store.num_scalars(),
        cross_modal: params.iter().any(|p| p.name.contains(".cfe.")),
        time_branch: model.ablation.time_branch,
        freq_branch: model.ablation.freq_branch,
        time_spatial: if model.ablation.time_branch { model.ablation.time_spatial.clone() } else { vec![] },
        freq_spatial: if model.ablation.freq_branch { model.ablation.freq_spatial.clone() } else { vec![] },
        params,
    }
}
