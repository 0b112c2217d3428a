//! Small three-stage convolutional network for desk-scale runs.
//!
//! Each stage halves the resolution: `conv3x3/s2 -> relu -> conv3x3 -> relu`,
//! with widths 16, 32, 64. Hierarchies 1..=3 tap the stage outputs
//! (strides 2, 4, 8). No normalization layers, so outputs are batch
//! independent in every mode.

use candle_core::{Module, Result, Tensor};
use candle_nn::{conv2d, Conv2d, Conv2dConfig, VarBuilder};

use super::Backbone;

pub const WIDTHS: [usize; 3] = [16, 32, 64];

struct Stage {
    down: Conv2d,
    body: Conv2d,
}

impl Stage {
    fn new(c_in: usize, c_out: usize, vb: VarBuilder) -> Result<Self> {
        let down = conv2d(
            c_in,
            c_out,
            3,
            Conv2dConfig {
                padding: 1,
                stride: 2,
                ..Default::default()
            },
            vb.pp("down"),
        )?;
        let body = conv2d(
            c_out,
            c_out,
            3,
            Conv2dConfig {
                padding: 1,
                ..Default::default()
            },
            vb.pp("body"),
        )?;
        Ok(Stage { down, body })
    }

    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        self.body.forward(&self.down.forward(xs)?.relu()?)?.relu()
    }
}

pub struct ToyNet {
    stages: Vec<Stage>,
}

impl ToyNet {
    pub fn new(max_level: usize, vb: VarBuilder) -> Result<Self> {
        let mut stages = Vec::new();
        let mut c_in = 3;
        for (i, &w) in WIDTHS.iter().enumerate().take(max_level) {
            stages.push(Stage::new(c_in, w, vb.pp(format!("stage{}", i + 1)))?);
            c_in = w;
        }
        Ok(ToyNet { stages })
    }
}

impl Backbone for ToyNet {
    fn forward_levels(&self, xs: &Tensor, _train: bool) -> Result<Vec<Option<Tensor>>> {
        // index 0 is the (absent) stem
        let mut out = vec![None];
        let mut h = xs.clone();
        for stage in &self.stages {
            h = stage.forward(&h)?;
            out.push(Some(h.clone()));
        }
        Ok(out)
    }
}
