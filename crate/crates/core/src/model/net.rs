use super::blocks::{self, AttentionWeights, EncoderLayerWeights, SeWeights, NORM_EPS};
use super::config::{ModelConfig, Variant, DEPTH, DOWNSAMPLES};
use super::params::{Init, ParamBuilder, ParamSet, ParamSpec};
use super::shapes::ShapeStep;
use crate::error::{Result, TabsError};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug)]
struct ConvLayer {
    weight: usize,
    bias: Option<usize>,
    stride: usize,
    pad: usize,
}

impl ConvLayer {
    fn declare(
        pb: &mut ParamBuilder,
        name: &str,
        c_out: usize,
        c_in: usize,
        k: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let fan_in = c_in * k * k * k;
        let weight = pb.declare(
            format!("{name}.weight"),
            &[c_out, c_in, k, k, k],
            Init::HeUniform { fan_in },
        );
        let bias = bias.then(|| pb.declare(format!("{name}.bias"), &[c_out], Init::Zeros));
        ConvLayer {
            weight,
            bias,
            stride,
            pad: k / 2,
        }
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        tape.conv3d(x, p[self.weight], self.bias.map(|b| p[b]), self.stride, self.pad)
    }
}

/// Convolution (no bias) followed by group normalization and ReLU.
#[derive(Clone, Debug)]
struct ConvNormAct {
    conv: ConvLayer,
    gamma: usize,
    beta: usize,
    groups: usize,
}

impl ConvNormAct {
    fn declare(
        pb: &mut ParamBuilder,
        cfg: &ModelConfig,
        name: &str,
        c_out: usize,
        c_in: usize,
        stride: usize,
    ) -> Self {
        let conv = ConvLayer::declare(pb, &format!("{name}.conv"), c_out, c_in, 3, stride, false);
        let gamma = pb.declare(format!("{name}.norm.gamma"), &[c_out], Init::Ones);
        let beta = pb.declare(format!("{name}.norm.beta"), &[c_out], Init::Zeros);
        ConvNormAct {
            conv,
            gamma,
            beta,
            groups: cfg.groups_for(c_out),
        }
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        let h = self.conv.forward(tape, p, x)?;
        let h = tape.group_norm(h, self.groups, p[self.gamma], p[self.beta], T::from_f64(NORM_EPS))?;
        Ok(tape.relu(h))
    }
}

/// Two conv-norm-ReLU stages, optionally wrapped with an identity or
/// projected shortcut.
#[derive(Clone, Debug)]
struct Block {
    first: ConvNormAct,
    second: ConvNormAct,
    residual: bool,
    proj: Option<ConvLayer>,
}

impl Block {
    fn declare(
        pb: &mut ParamBuilder,
        cfg: &ModelConfig,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        let first = ConvNormAct::declare(pb, cfg, &format!("{name}.conv1"), c_out, c_in, 1);
        let second = ConvNormAct::declare(pb, cfg, &format!("{name}.conv2"), c_out, c_out, 1);
        let residual = cfg.variant.is_residual();
        let proj = (residual && c_in != c_out)
            .then(|| ConvLayer::declare(pb, &format!("{name}.proj"), c_out, c_in, 1, 1, true));
        Block {
            first,
            second,
            residual,
            proj,
        }
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        let h = self.first.forward(tape, p, x)?;
        let h = self.second.forward(tape, p, h)?;
        if !self.residual {
            return Ok(h);
        }
        let shortcut = match &self.proj {
            Some(proj) => proj.forward(tape, p, x)?,
            None => x,
        };
        tape.add(h, shortcut)
    }
}

#[derive(Clone, Debug)]
struct SeLayer {
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

impl SeLayer {
    fn declare(pb: &mut ParamBuilder, name: &str, channels: usize, reduction: usize) -> Self {
        // Narrow early levels cannot afford the full reduction.
        let hidden = blocks::se_hidden(channels, reduction.min(channels)).unwrap_or(1);
        SeLayer {
            fc1_w: pb.declare(
                format!("{name}.fc1.weight"),
                &[channels, hidden],
                // The squeezed input is non-negative, so a negative weight
                // would leave its hidden unit dead from the first step.
                Init::HeUniformPositive { fan_in: channels },
            ),
            fc1_b: pb.declare(format!("{name}.fc1.bias"), &[hidden], Init::Zeros),
            fc2_w: pb.declare(
                format!("{name}.fc2.weight"),
                &[hidden, channels],
                Init::HeUniform { fan_in: hidden },
            ),
            fc2_b: pb.declare(format!("{name}.fc2.bias"), &[channels], Init::Zeros),
        }
    }

    fn bind(&self, p: &[Var]) -> SeWeights {
        SeWeights {
            fc1_w: p[self.fc1_w],
            fc1_b: p[self.fc1_b],
            fc2_w: p[self.fc2_w],
            fc2_b: p[self.fc2_b],
        }
    }
}

#[derive(Clone, Debug)]
struct LinearIdx {
    w: usize,
    b: usize,
}

impl LinearIdx {
    fn declare(pb: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize) -> Self {
        LinearIdx {
            w: pb.declare(
                format!("{name}.weight"),
                &[d_in, d_out],
                Init::HeUniform { fan_in: d_in },
            ),
            b: pb.declare(format!("{name}.bias"), &[d_out], Init::Zeros),
        }
    }
}

#[derive(Clone, Debug)]
struct EncoderLayerIdx {
    q: LinearIdx,
    k: LinearIdx,
    v: LinearIdx,
    o: LinearIdx,
    ln1: (usize, usize),
    ff1: LinearIdx,
    ff2: LinearIdx,
    ln2: (usize, usize),
}

impl EncoderLayerIdx {
    fn declare(pb: &mut ParamBuilder, name: &str, d: usize, ffn: usize) -> Self {
        let q = LinearIdx::declare(pb, &format!("{name}.attn.q"), d, d);
        let k = LinearIdx::declare(pb, &format!("{name}.attn.k"), d, d);
        let v = LinearIdx::declare(pb, &format!("{name}.attn.v"), d, d);
        let o = LinearIdx::declare(pb, &format!("{name}.attn.out"), d, d);
        let ln1 = (
            pb.declare(format!("{name}.ln1.gamma"), &[d], Init::Ones),
            pb.declare(format!("{name}.ln1.beta"), &[d], Init::Zeros),
        );
        let ff1 = LinearIdx::declare(pb, &format!("{name}.ffn.fc1"), d, ffn);
        let ff2 = LinearIdx::declare(pb, &format!("{name}.ffn.fc2"), ffn, d);
        let ln2 = (
            pb.declare(format!("{name}.ln2.gamma"), &[d], Init::Ones),
            pb.declare(format!("{name}.ln2.beta"), &[d], Init::Zeros),
        );
        EncoderLayerIdx {
            q,
            k,
            v,
            o,
            ln1,
            ff1,
            ff2,
            ln2,
        }
    }

    fn bind(&self, p: &[Var]) -> EncoderLayerWeights {
        EncoderLayerWeights {
            attn: AttentionWeights {
                q_w: p[self.q.w],
                q_b: p[self.q.b],
                k_w: p[self.k.w],
                k_b: p[self.k.b],
                v_w: p[self.v.w],
                v_b: p[self.v.b],
                o_w: p[self.o.w],
                o_b: p[self.o.b],
            },
            ln1_gamma: p[self.ln1.0],
            ln1_beta: p[self.ln1.1],
            ff1_w: p[self.ff1.w],
            ff1_b: p[self.ff1.b],
            ff2_w: p[self.ff2.w],
            ff2_b: p[self.ff2.b],
            ln2_gamma: p[self.ln2.0],
            ln2_beta: p[self.ln2.1],
        }
    }
}

/// Tokenization, Transformer encoder and de-tokenization at the bottleneck.
#[derive(Clone, Debug)]
struct TransformerBottleneck {
    proj: ConvLayer,
    positional: usize,
    layers: Vec<EncoderLayerIdx>,
    detok: ConvLayer,
    heads: usize,
    edge: usize,
}

#[derive(Clone, Debug)]
struct Arch {
    encoder: Vec<Block>,
    se: Vec<Option<SeLayer>>,
    down: Vec<ConvNormAct>,
    bottleneck: Option<TransformerBottleneck>,
    up: Vec<usize>,
    decoder: Vec<Block>,
    head: ConvLayer,
}

fn layout(cfg: &ModelConfig) -> Result<(Arch, Vec<ParamSpec>)> {
    cfg.validate()?;
    let mut pb = ParamBuilder::new();
    let ch = cfg.channel_schedule();
    let mut encoder = Vec::with_capacity(DEPTH);
    let mut se = Vec::with_capacity(DOWNSAMPLES);
    let mut down = Vec::with_capacity(DOWNSAMPLES);
    for level in 0..DEPTH {
        let c_in = if level == 0 { cfg.in_channels } else { ch[level - 1] };
        encoder.push(Block::declare(&mut pb, cfg, &format!("enc{level}"), c_in, ch[level]));
        if level < DOWNSAMPLES {
            se.push((cfg.variant == Variant::UnetSe).then(|| {
                SeLayer::declare(&mut pb, &format!("se{level}"), ch[level], cfg.se_reduction)
            }));
            down.push(ConvNormAct::declare(
                &mut pb,
                cfg,
                &format!("down{level}"),
                ch[level],
                ch[level],
                2,
            ));
        }
    }
    let bottleneck = if cfg.variant == Variant::Tabs {
        let (f, d) = (cfg.features, cfg.token_dim);
        let proj = ConvLayer::declare(&mut pb, "tok.proj", d, f, 1, 1, true);
        let positional = pb.declare(
            "tok.positional",
            &[cfg.token_count(), d],
            Init::Normal { std: 0.02 },
        );
        let layers = (0..cfg.transformer_layers)
            .map(|l| EncoderLayerIdx::declare(&mut pb, &format!("transformer.layer{l}"), d, cfg.ffn_dim))
            .collect();
        let detok = ConvLayer::declare(&mut pb, "detok.conv", f, d, 3, 1, true);
        Some(TransformerBottleneck {
            proj,
            positional,
            layers,
            detok,
            heads: cfg.transformer_heads,
            edge: cfg.bottleneck_edge(),
        })
    } else {
        None
    };
    let mut up = vec![0; DOWNSAMPLES];
    let mut decoder_rev = Vec::with_capacity(DOWNSAMPLES);
    for level in (0..DOWNSAMPLES).rev() {
        let (c_deep, c) = (ch[level + 1], ch[level]);
        up[level] = pb.declare(
            format!("up{level}.weight"),
            &[c_deep, c, 2, 2, 2],
            Init::HeUniform { fan_in: c_deep * 8 },
        );
        decoder_rev.push(Block::declare(&mut pb, cfg, &format!("dec{level}"), 2 * c, c));
    }
    decoder_rev.reverse();
    let head = ConvLayer::declare(&mut pb, "head", cfg.out_channels, ch[0], 1, 1, true);
    Ok((
        Arch {
            encoder,
            se,
            down,
            bottleneck,
            up,
            decoder: decoder_rev,
            head,
        },
        pb.into_specs(),
    ))
}

/// Parameter declarations for `config` without allocating anything.
pub fn parameter_specs(config: &ModelConfig) -> Result<Vec<ParamSpec>> {
    layout(config).map(|(_, specs)| specs)
}

/// Exact number of scalar parameters.
pub fn count_parameters(config: &ModelConfig) -> Result<usize> {
    Ok(parameter_specs(config)?.iter().map(ParamSpec::numel).sum())
}

/// Result of a forward pass recorded on a tape.
pub struct Forward {
    pub output: Var,
    /// Tape variables of the model parameters, in declaration order.
    pub params: Vec<Var>,
}

/// One of the four segmentation networks with its parameters.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    config: ModelConfig,
    arch: Arch,
    params: ParamSet<T>,
    bypass_transformer: bool,
}

impl<T: Scalar> Model<T> {
    /// Lays out the network and initializes parameters from `config.seed`.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        let (arch, specs) = layout(config)?;
        Ok(Model {
            config: config.clone(),
            arch,
            params: ParamSet::init(&specs, config.seed),
            bypass_transformer: false,
        })
    }

    /// Wraps existing parameters, checking names and shapes against the layout.
    pub fn from_params(config: &ModelConfig, params: ParamSet<T>) -> Result<Self> {
        let (arch, specs) = layout(config)?;
        if specs.len() != params.len() {
            return Err(TabsError::config(format!(
                "model expects {} parameters, got {}",
                specs.len(),
                params.len()
            )));
        }
        for (spec, (name, t)) in specs.iter().zip(params.iter()) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(TabsError::config(format!(
                    "parameter `{name}` {:?} does not match expected `{}` {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        Ok(Model {
            config: config.clone(),
            arch,
            params,
            bypass_transformer: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet<T> {
        self.params
    }

    /// Skips tokenization, Transformer and de-tokenization so the bottleneck
    /// features flow straight to the decoder. A TABS model in this mode
    /// computes exactly what a ResUnet with the same shared weights computes.
    pub fn set_transformer_bypass(&mut self, bypass: bool) {
        self.bypass_transformer = bypass;
    }

    /// Records a forward pass of `input: [in_channels, N, N, N]` on `tape`.
    pub fn forward(&self, tape: &mut Tape<T>, input: Var, track_grads: bool) -> Result<Forward> {
        let params = self.params.bind(tape, track_grads);
        let output = self.run(tape, &params, input, &mut None)?;
        Ok(Forward { output, params })
    }

    /// Probability maps `[out_channels, N, N, N]` for one volume.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let fwd = self.forward(&mut tape, x, false)?;
        Ok(tape.value(fwd.output).clone())
    }

    /// Executes a forward pass and returns the shape at every named stage.
    pub fn trace_shapes(&self, input: &Tensor<T>) -> Result<Vec<ShapeStep>> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let params = self.params.bind(&mut tape, false);
        let mut trace = Some(Vec::new());
        self.run(&mut tape, &params, x, &mut trace)?;
        Ok(trace.unwrap_or_default())
    }

    fn run(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        input: Var,
        trace: &mut Option<Vec<ShapeStep>>,
    ) -> Result<Var> {
        let n = self.config.input_size;
        let expected = [self.config.in_channels, n, n, n];
        if tape.shape(input) != expected {
            return Err(TabsError::config(format!(
                "model input must be {expected:?}, got {:?}",
                tape.shape(input)
            )));
        }
        let mut record = |name: &str, v: Var, tape: &Tape<T>| {
            if let Some(t) = trace.as_mut() {
                t.push(ShapeStep::new(name, tape.shape(v)));
            }
        };
        record("input", input, tape);

        let arch = &self.arch;
        let mut skips = Vec::with_capacity(DOWNSAMPLES);
        let mut x = input;
        for level in 0..DEPTH {
            x = arch.encoder[level].forward(tape, p, x)?;
            record(&format!("enc{level}"), x, tape);
            if level < DOWNSAMPLES {
                if let Some(se) = &arch.se[level] {
                    x = blocks::se_block(tape, x, &se.bind(p))?;
                }
                skips.push(x);
                x = arch.down[level].forward(tape, p, x)?;
            }
        }
        record("encoder_out", x, tape);

        if let Some(bn) = arch.bottleneck.as_ref().filter(|_| !self.bypass_transformer) {
            let tokens = blocks::tokenize(
                tape,
                x,
                p[bn.proj.weight],
                bn.proj.bias.map(|b| p[b]),
                p[bn.positional],
            )?;
            record("tokens", tokens, tape);
            let layers: Vec<_> = bn.layers.iter().map(|l| l.bind(p)).collect();
            let (encoded, _) = blocks::transformer_encoder(tape, tokens, &layers, bn.heads)?;
            record("transformer_out", encoded, tape);
            let volume = blocks::reshape_tokens(tape, encoded, bn.edge)?;
            record("reshaped", volume, tape);
            x = bn.detok.forward(tape, p, volume)?;
            record("detokenized", x, tape);
        }

        for level in (0..DOWNSAMPLES).rev() {
            let up = tape.conv_transpose3d(x, p[arch.up[level]], None, 2)?;
            record(&format!("up{level}"), up, tape);
            let merged = tape.concat_channels(&[up, skips[level]])?;
            x = arch.decoder[level].forward(tape, p, merged)?;
            record(&format!("dec{level}"), x, tape);
        }
        let logits = arch.head.forward(tape, p, x)?;
        record("logits", logits, tape);
        let probs = tape.softmax(logits, 0)?;
        record("decoder_out", probs, tape);
        Ok(probs)
    }
}
