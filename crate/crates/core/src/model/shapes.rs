use std::fmt;

use super::config::{ModelConfig, Variant, DEPTH, DOWNSAMPLES};
use crate::error::Result;
use crate::tensor::kernels::conv_out_len;

/// Named activation shape at one stage of the forward chain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeStep {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ShapeStep {
    pub fn new(name: &str, shape: &[usize]) -> Self {
        ShapeStep {
            name: name.to_string(),
            shape: shape.to_vec(),
        }
    }

    /// Extents joined with `×`, e.g. `128×12×12×12`.
    pub fn dims(&self) -> String {
        self.shape
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join("×")
    }
}

impl fmt::Display for ShapeStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.name, self.dims())
    }
}

/// Shapes of every named stage, derived from the configuration alone. Mirrors
/// the stage names recorded by `Model::trace_shapes`.
pub fn shape_chain(config: &ModelConfig) -> Result<Vec<ShapeStep>> {
    config.validate()?;
    let ch = config.channel_schedule();
    let n = config.input_size;
    let vol = |c: usize, e: usize| vec![c, e, e, e];
    let mut out = vec![ShapeStep {
        name: "input".into(),
        shape: vol(config.in_channels, n),
    }];
    let mut edges = [0; DEPTH];
    let mut edge = n;
    for level in 0..DEPTH {
        edges[level] = edge;
        out.push(ShapeStep {
            name: format!("enc{level}"),
            shape: vol(ch[level], edge),
        });
        if level < DOWNSAMPLES {
            edge = conv_out_len(edge, 3, 2, 1).expect("validated size");
        }
    }
    out.push(ShapeStep {
        name: "encoder_out".into(),
        shape: vol(ch[DEPTH - 1], edge),
    });
    if config.variant == Variant::Tabs {
        let tokens = edge * edge * edge;
        let d = config.token_dim;
        out.push(ShapeStep {
            name: "tokens".into(),
            shape: vec![tokens, d],
        });
        out.push(ShapeStep {
            name: "transformer_out".into(),
            shape: vec![tokens, d],
        });
        out.push(ShapeStep {
            name: "reshaped".into(),
            shape: vol(d, edge),
        });
        out.push(ShapeStep {
            name: "detokenized".into(),
            shape: vol(config.features, edge),
        });
    }
    for level in (0..DOWNSAMPLES).rev() {
        edge *= 2;
        debug_assert_eq!(edge, edges[level]);
        out.push(ShapeStep {
            name: format!("up{level}"),
            shape: vol(ch[level], edge),
        });
        out.push(ShapeStep {
            name: format!("dec{level}"),
            shape: vol(ch[level], edge),
        });
    }
    out.push(ShapeStep {
        name: "logits".into(),
        shape: vol(config.out_channels, n),
    });
    out.push(ShapeStep {
        name: "decoder_out".into(),
        shape: vol(config.out_channels, n),
    });
    Ok(out)
}

/// Looks up a stage by name.
pub fn find<'a>(chain: &'a [ShapeStep], name: &str) -> Option<&'a ShapeStep> {
    chain.iter().find(|s| s.name == name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_bottleneck() {
        let chain = shape_chain(&ModelConfig::paper(Variant::Tabs)).unwrap();
        assert_eq!(find(&chain, "encoder_out").unwrap().dims(), "128×12×12×12");
        assert_eq!(find(&chain, "tokens").unwrap().dims(), "1728×512");
        assert_eq!(find(&chain, "reshaped").unwrap().dims(), "512×12×12×12");
        assert_eq!(find(&chain, "decoder_out").unwrap().dims(), "3×192×192×192");
    }

    #[test]
    fn non_tabs_has_no_tokens() {
        let chain = shape_chain(&ModelConfig::desk(Variant::Unet)).unwrap();
        assert!(find(&chain, "tokens").is_none());
        assert_eq!(find(&chain, "encoder_out").unwrap().shape, vec![16, 2, 2, 2]);
    }
}
