//! Per-modality encoders.
//!
//! An encoder is a backbone trunk followed by one or more projection heads of
//! `projection_dim` units with dropout. The common encoder has a single head
//! (`proj`, shared features); the unique encoder has two (`proj_spe`,
//! `proj_unu`) over one trunk.
//!
//! Inputs arrive as `(batch, size)` rows of row-major flattened samples.
//! Sequence backbones view them as `(batch * steps, features)`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{Layout, ModalityConfig};
use crate::error::{Error, Result};
use crate::nn::{init_batch_norm, init_layer_norm, Forward, Mode};
use crate::params::{fan_in_uniform, init_linear, init_weight, ParamBundle};
use crate::rng::{self, ChaCha8Rng};
use crate::tape::{conv_out, im2col_1d_index, im2col_2d_index, Mat, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Mlp,
    Tempcnn,
    Lstm,
    Attention,
    ConvtranLite,
    Cnn2d,
}

impl Backbone {
    pub const ALL: [Backbone; 6] = [
        Backbone::Mlp,
        Backbone::Tempcnn,
        Backbone::Lstm,
        Backbone::Attention,
        Backbone::ConvtranLite,
        Backbone::Cnn2d,
    ];

    pub fn accepts(self, layout: Layout) -> bool {
        match self {
            Backbone::Mlp => true,
            Backbone::Cnn2d => layout == Layout::Image,
            _ => layout == Layout::Timeseries,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSpec {
    pub backbone: Backbone,
    pub hidden_units: usize,
    pub num_layers: usize,
    pub kernel_size: usize,
    pub num_heads: usize,
    pub projection_dim: usize,
    pub projection_dropout: f64,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            backbone: Backbone::Tempcnn,
            hidden_units: 128,
            num_layers: 2,
            kernel_size: 5,
            num_heads: 8,
            projection_dim: 128,
            projection_dropout: 0.2,
        }
    }
}

impl EncoderSpec {
    pub fn with_backbone(backbone: Backbone) -> Self {
        EncoderSpec {
            backbone,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.projection_dim == 0 {
            return bad("projection_dim must be >= 1".into());
        }
        if self.hidden_units == 0 || self.num_layers == 0 {
            return bad("hidden_units and num_layers must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.projection_dropout) {
            return bad(format!("projection_dropout {} not in [0, 1)", self.projection_dropout));
        }
        if matches!(self.backbone, Backbone::Tempcnn | Backbone::ConvtranLite)
            && (self.kernel_size == 0 || self.kernel_size % 2 == 0)
        {
            return bad(format!("kernel_size must be odd, got {}", self.kernel_size));
        }
        if matches!(self.backbone, Backbone::Attention | Backbone::ConvtranLite)
            && (self.num_heads == 0 || self.hidden_units % self.num_heads != 0)
        {
            return bad(format!(
                "num_heads {} must divide the attention width {}",
                self.num_heads, self.hidden_units
            ));
        }
        Ok(())
    }
}

/// Which feature spaces an encoder produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderRole {
    /// `E_com`: shared features.
    Common,
    /// `E_uni`: specific and unused features.
    Unique,
    /// `E_uni` without the unused head.
    UniqueSpecificOnly,
    /// One trunk feeding shared, specific and unused heads.
    Combined,
}

impl EncoderRole {
    pub fn heads(self) -> &'static [&'static str] {
        match self {
            EncoderRole::Common => &["proj"],
            EncoderRole::Unique => &["proj_spe", "proj_unu"],
            EncoderRole::UniqueSpecificOnly => &["proj_spe"],
            EncoderRole::Combined => &["proj_sha", "proj_spe", "proj_unu"],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub spec: EncoderSpec,
    pub modality: ModalityConfig,
    pub prefix: String,
    pub role: EncoderRole,
}

impl Encoder {
    pub fn new(spec: EncoderSpec, modality: ModalityConfig, prefix: &str, role: EncoderRole) -> Result<Self> {
        spec.validate()?;
        modality.validate()?;
        if !spec.backbone.accepts(modality.layout) {
            return Err(Error::Config(format!(
                "backbone {:?} cannot encode {:?} modality `{}`",
                spec.backbone, modality.layout, modality.name
            )));
        }
        Ok(Encoder {
            spec,
            modality,
            prefix: prefix.to_string(),
            role,
        })
    }

    fn p(&self, rest: &str) -> String {
        format!("{}.{rest}", self.prefix)
    }

    fn steps_features(&self) -> (usize, usize) {
        (self.modality.shape[0], self.modality.shape[1])
    }

    /// Adds this encoder's parameters and buffers under its prefix.
    pub fn init(&self, params: &mut ParamBundle, buffers: &mut ParamBundle, rng: &mut ChaCha8Rng) {
        let s = &self.spec;
        let h = s.hidden_units;
        match s.backbone {
            Backbone::Mlp => {
                let mut width = self.modality.size();
                for l in 0..s.num_layers {
                    init_weight(params, rng, &self.p(&format!("trunk.l{l}")), width, h);
                    init_batch_norm(params, buffers, &self.p(&format!("trunk.bn{l}")), h);
                    width = h;
                }
            }
            Backbone::Tempcnn => {
                let (_, f) = self.steps_features();
                let mut width = f;
                for l in 0..s.num_layers {
                    init_weight(params, rng, &self.p(&format!("trunk.conv{l}")), s.kernel_size * width, h);
                    init_batch_norm(params, buffers, &self.p(&format!("trunk.bn{l}")), h);
                    width = h;
                }
            }
            Backbone::Lstm => {
                let (_, f) = self.steps_features();
                let mut width = f;
                for l in 0..s.num_layers {
                    let pre = self.p(&format!("trunk.lstm{l}"));
                    params.insert(format!("{pre}.wx"), fan_in_uniform(rng, width, 4 * h, width));
                    params.insert(format!("{pre}.wh"), fan_in_uniform(rng, h, 4 * h, h));
                    params.insert(format!("{pre}.b"), Array2::zeros((1, 4 * h)));
                    width = h;
                }
            }
            Backbone::Attention => {
                let (t, f) = self.steps_features();
                init_linear(params, rng, &self.p("trunk.embed"), f, h);
                params.insert(self.p("trunk.pos"), fan_in_uniform(rng, t, h, h));
                for l in 0..s.num_layers {
                    self.init_attention_block(params, rng, &self.p(&format!("trunk.block{l}")));
                }
                init_layer_norm(params, &self.p("trunk.ln_out"), h);
            }
            Backbone::ConvtranLite => {
                let (t, f) = self.steps_features();
                init_weight(params, rng, &self.p("trunk.conv0"), s.kernel_size * f, h);
                init_batch_norm(params, buffers, &self.p("trunk.bn0"), h);
                params.insert(self.p("trunk.pos"), fan_in_uniform(rng, t, h, h));
                self.init_attention_block(params, rng, &self.p("trunk.block0"));
                init_layer_norm(params, &self.p("trunk.ln_out"), h);
            }
            Backbone::Cnn2d => {
                let mut width = self.modality.shape[0];
                for l in 0..s.num_layers {
                    init_weight(params, rng, &self.p(&format!("trunk.conv{l}")), 9 * width, h);
                    init_batch_norm(params, buffers, &self.p(&format!("trunk.bn{l}")), h);
                    width = h;
                }
            }
        }
        for head in self.role.heads() {
            init_linear(params, rng, &self.p(head), h, s.projection_dim);
        }
    }

    fn init_attention_block(&self, params: &mut ParamBundle, rng: &mut ChaCha8Rng, pre: &str) {
        let h = self.spec.hidden_units;
        init_layer_norm(params, &format!("{pre}.ln1"), h);
        for name in ["q", "k", "v", "o"] {
            init_linear(params, rng, &format!("{pre}.{name}"), h, h);
        }
        init_layer_norm(params, &format!("{pre}.ln2"), h);
        init_linear(params, rng, &format!("{pre}.ff1"), h, 2 * h);
        init_linear(params, rng, &format!("{pre}.ff2"), 2 * h, h);
    }

    /// Runs the trunk and every projection head on a `(batch, size)` input,
    /// returning one `(batch, projection_dim)` node per head in role order.
    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Vec<Var>> {
        let (batch, size) = f.graph.shape(x);
        if size != self.modality.size() {
            return Err(Error::Shape(format!(
                "modality `{}` expects {} values per sample, got {size}",
                self.modality.name,
                self.modality.size()
            )));
        }
        if batch == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        let trunk = self.trunk(f, x, batch)?;
        self.role
            .heads()
            .iter()
            .map(|head| {
                let z = f.linear(&self.p(head), trunk)?;
                Ok(f.dropout(z, self.spec.projection_dropout))
            })
            .collect()
    }

    fn trunk(&self, f: &mut Forward<'_>, x: Var, batch: usize) -> Result<Var> {
        let s = &self.spec;
        match s.backbone {
            Backbone::Mlp => {
                let mut h = x;
                for l in 0..s.num_layers {
                    h = f.linear_no_bias(&self.p(&format!("trunk.l{l}")), h)?;
                    h = f.batch_norm(&self.p(&format!("trunk.bn{l}")), h)?;
                    h = f.graph.relu(h);
                }
                Ok(h)
            }
            Backbone::Tempcnn => {
                let (t, feat) = self.steps_features();
                let mut h = f.graph.reshape(x, batch * t, feat);
                for l in 0..s.num_layers {
                    h = self.conv1d_block(f, h, batch, l)?;
                }
                Ok(f.graph.mean_groups(h, t))
            }
            Backbone::Lstm => {
                let (t, feat) = self.steps_features();
                let mut seq = f.graph.reshape(x, batch * t, feat);
                let mut last = seq;
                for l in 0..s.num_layers {
                    let (out, h_last) = self.lstm_layer(f, seq, batch, l)?;
                    seq = out;
                    last = h_last;
                }
                Ok(last)
            }
            Backbone::Attention => {
                let (t, feat) = self.steps_features();
                let seq = f.graph.reshape(x, batch * t, feat);
                let mut h = f.linear(&self.p("trunk.embed"), seq)?;
                let pos = f.param(&self.p("trunk.pos"))?;
                h = f.graph.add_tiled(h, pos);
                for l in 0..s.num_layers {
                    h = self.attention_block(f, h, &self.p(&format!("trunk.block{l}")))?;
                }
                h = f.layer_norm(&self.p("trunk.ln_out"), h)?;
                Ok(f.graph.mean_groups(h, t))
            }
            Backbone::ConvtranLite => {
                let (t, feat) = self.steps_features();
                let seq = f.graph.reshape(x, batch * t, feat);
                let mut h = self.conv1d_block(f, seq, batch, 0)?;
                let pos = f.param(&self.p("trunk.pos"))?;
                h = f.graph.add_tiled(h, pos);
                h = self.attention_block(f, h, &self.p("trunk.block0"))?;
                h = f.layer_norm(&self.p("trunk.ln_out"), h)?;
                Ok(f.graph.mean_groups(h, t))
            }
            Backbone::Cnn2d => {
                let (c, mut hh, mut ww) = (self.modality.shape[0], self.modality.shape[1], self.modality.shape[2]);
                // (batch, c*h*w) channel-major to channels-last rows
                let hw = hh * ww;
                let index = (0..batch)
                    .flat_map(|b| (0..hw).flat_map(move |p| (0..c).map(move |ch| b * c * hw + ch * hw + p)))
                    .collect();
                let mut h = f.graph.gather(x, batch * hw, c, index);
                let mut width = c;
                for l in 0..s.num_layers {
                    let (ho, wo) = (conv_out(hh, 3, 2, 1), conv_out(ww, 3, 2, 1));
                    let cols = f.graph.gather(
                        h,
                        batch * ho * wo,
                        9 * width,
                        im2col_2d_index(batch, (hh, ww), width, 3, 2, 1),
                    );
                    h = f.linear_no_bias(&self.p(&format!("trunk.conv{l}")), cols)?;
                    h = f.batch_norm(&self.p(&format!("trunk.bn{l}")), h)?;
                    h = f.graph.relu(h);
                    (hh, ww, width) = (ho, wo, s.hidden_units);
                }
                Ok(f.graph.mean_groups(h, hh * ww))
            }
        }
    }

    fn conv1d_block(&self, f: &mut Forward<'_>, seq: Var, batch: usize, l: usize) -> Result<Var> {
        let (t, _) = self.steps_features();
        let k = self.spec.kernel_size;
        let (rows, width) = f.graph.shape(seq);
        let cols = f.graph.gather(seq, rows, k * width, im2col_1d_index(batch, t, width, k));
        let h = f.linear_no_bias(&self.p(&format!("trunk.conv{l}")), cols)?;
        let h = f.batch_norm(&self.p(&format!("trunk.bn{l}")), h)?;
        Ok(f.graph.relu(h))
    }

    /// One LSTM layer over `(batch * steps, width)`; returns the hidden
    /// sequence and the final hidden state.
    fn lstm_layer(&self, f: &mut Forward<'_>, seq: Var, batch: usize, l: usize) -> Result<(Var, Var)> {
        let (t, _) = self.steps_features();
        let hdim = self.spec.hidden_units;
        let pre = self.p(&format!("trunk.lstm{l}"));
        let wx = f.param(&format!("{pre}.wx"))?;
        let wh = f.param(&format!("{pre}.wh"))?;
        let b = f.param(&format!("{pre}.b"))?;
        let xw = f.graph.matmul(seq, wx);
        let xw = f.graph.add_row(xw, b);
        let mut h = f.input(Mat::zeros((batch, hdim)));
        let mut c = f.input(Mat::zeros((batch, hdim)));
        let mut outputs = Vec::with_capacity(t);
        for step in 0..t {
            let rows: Vec<usize> = (0..batch).map(|bi| bi * t + step).collect();
            let x_t = f.graph.select_rows(xw, &rows);
            let hw = f.graph.matmul(h, wh);
            let gates = f.graph.add(x_t, hw);
            let i = f.graph.cols(gates, 0, hdim);
            let i = f.graph.sigmoid(i);
            let fg = f.graph.cols(gates, hdim, hdim);
            let fg = f.graph.sigmoid(fg);
            let g = f.graph.cols(gates, 2 * hdim, hdim);
            let g = f.graph.tanh(g);
            let o = f.graph.cols(gates, 3 * hdim, hdim);
            let o = f.graph.sigmoid(o);
            let keep = f.graph.mul(fg, c);
            let write = f.graph.mul(i, g);
            c = f.graph.add(keep, write);
            let tc = f.graph.tanh(c);
            h = f.graph.mul(o, tc);
            outputs.push(h);
        }
        let wide = f.graph.concat_cols(&outputs);
        let out = f.graph.reshape(wide, batch * t, hdim);
        Ok((out, h))
    }

    fn attention_block(&self, f: &mut Forward<'_>, x: Var, pre: &str) -> Result<Var> {
        let (t, _) = self.steps_features();
        let h = f.layer_norm(&format!("{pre}.ln1"), x)?;
        let q = f.linear(&format!("{pre}.q"), h)?;
        let k = f.linear(&format!("{pre}.k"), h)?;
        let v = f.linear(&format!("{pre}.v"), h)?;
        let a = f.graph.attention(q, k, v, t, self.spec.num_heads);
        let o = f.linear(&format!("{pre}.o"), a)?;
        let x = f.graph.add(x, o);
        let h = f.layer_norm(&format!("{pre}.ln2"), x)?;
        let h = f.linear(&format!("{pre}.ff1"), h)?;
        let h = f.graph.relu(h);
        let h = f.linear(&format!("{pre}.ff2"), h)?;
        Ok(f.graph.add(x, h))
    }
}

/// A standalone encoder with its own parameters.
#[derive(Debug, Clone)]
pub struct EncoderModule {
    pub encoder: Encoder,
    pub params: ParamBundle,
    pub buffers: ParamBundle,
}

/// Builds and initializes an encoder; identical `(spec, modality, role, seed)`
/// give identical parameters.
pub fn build_encoder(
    spec: &EncoderSpec,
    modality: &ModalityConfig,
    role: EncoderRole,
    seed: u64,
) -> Result<EncoderModule> {
    let encoder = Encoder::new(spec.clone(), modality.clone(), "enc", role)?;
    let mut params = ParamBundle::new();
    let mut buffers = ParamBundle::new();
    let mut rng = rng::rng(seed);
    encoder.init(&mut params, &mut buffers, &mut rng);
    Ok(EncoderModule {
        encoder,
        params,
        buffers,
    })
}

impl EncoderModule {
    pub fn num_params(&self) -> usize {
        self.params.num_values()
    }

    /// Runs every head on a batch and returns the values.
    pub fn encode(&self, x: &Mat, mode: Mode) -> Result<Vec<Mat>> {
        let mut f = Forward::new(&self.params, &self.buffers, mode);
        let xv = f.input(x.clone());
        let outs = self.encoder.forward(&mut f, xv)?;
        Ok(outs.into_iter().map(|v| f.graph.value(v).clone()).collect())
    }
}

/// Shared features `z_sha` of a batch from a common encoder.
pub fn encode_common(module: &EncoderModule, x: &Mat, mode: Mode) -> Result<Mat> {
    if module.encoder.role != EncoderRole::Common {
        return Err(Error::Config("encode_common needs a common encoder".into()));
    }
    Ok(module.encode(x, mode)?.remove(0))
}

/// Specific and unused features `(z_spe, z_unu)` from a unique encoder.
pub fn encode_unique(module: &EncoderModule, x: &Mat, mode: Mode) -> Result<(Mat, Mat)> {
    if module.encoder.role != EncoderRole::Unique {
        return Err(Error::Config("encode_unique needs a unique encoder".into()));
    }
    let mut outs = module.encode(x, mode)?;
    let unu = outs.pop().expect("two heads");
    let spe = outs.pop().expect("two heads");
    Ok((spe, unu))
}
