//! HRNet-W18/W32/W48 feature extractor.
//!
//! Layout and tensor names follow timm's `HighResolutionNet` with
//! `feature_location="incre"`: hierarchy 0 is the first stem activation
//! (64 ch, stride 2); hierarchies 1..=4 are the incremental bottleneck heads
//! applied to the four stage-4 branches (128/256/512/1024 ch at strides
//! 4/8/16/32).

use candle_core::{Result, Tensor};
use candle_nn::VarBuilder;

use super::resnet::{Block, ConvBn};
use super::Backbone;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Width {
    W18,
    W32,
    W48,
}

impl Width {
    fn base(self) -> usize {
        match self {
            Width::W18 => 18,
            Width::W32 => 32,
            Width::W48 => 48,
        }
    }
}

pub const CHANNELS: [usize; 5] = [64, 128, 256, 512, 1024];
const HEAD_PLANES: [usize; 4] = [32, 64, 128, 256];

/// `conv -> bn -> (relu)` unit inside transitions and fuse paths.
struct Unit {
    cb: ConvBn,
    relu: bool,
}

impl Unit {
    fn forward(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.cb.forward(xs, train)?;
        if self.relu {
            y.relu()
        } else {
            Ok(y)
        }
    }
}

enum Path {
    Identity,
    Chain(Vec<Unit>),
    /// 1x1 projection followed by nearest upsampling by `factor`.
    Up(ConvBn, usize),
}

impl Path {
    fn forward(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        match self {
            Path::Identity => Ok(xs.clone()),
            Path::Chain(units) => {
                let mut h = xs.clone();
                for u in units {
                    h = u.forward(&h, train)?;
                }
                Ok(h)
            }
            Path::Up(cb, factor) => {
                let y = cb.forward(xs, train)?;
                let (_, _, h, w) = y.dims4()?;
                y.upsample_nearest2d(h * factor, w * factor)
            }
        }
    }
}

struct HrModule {
    branches: Vec<Vec<Block>>,
    fuse: Vec<Vec<Path>>,
}

impl HrModule {
    fn new(channels: &[usize], vb: VarBuilder) -> Result<Self> {
        let n = channels.len();
        let mut branches = Vec::with_capacity(n);
        for (i, &c) in channels.iter().enumerate() {
            let bvb = vb.pp(format!("branches.{i}"));
            let blocks = (0..4)
                .map(|b| Block::basic(c, c, 1, bvb.pp(b)))
                .collect::<Result<Vec<_>>>()?;
            branches.push(blocks);
        }
        let mut fuse = Vec::new();
        if n > 1 {
            for i in 0..n {
                let mut row = Vec::with_capacity(n);
                for j in 0..n {
                    let fvb = vb.pp(format!("fuse_layers.{i}.{j}"));
                    let path = if j > i {
                        Path::Up(
                            ConvBn::new(channels[j], channels[i], 1, 1, fvb.pp(0), fvb.pp(1))?,
                            1 << (j - i),
                        )
                    } else if j == i {
                        Path::Identity
                    } else {
                        let steps = i - j;
                        let mut units = Vec::with_capacity(steps);
                        for k in 0..steps {
                            let last = k == steps - 1;
                            let c_out = if last { channels[i] } else { channels[j] };
                            let kvb = fvb.pp(k);
                            units.push(Unit {
                                cb: ConvBn::new(channels[j], c_out, 3, 2, kvb.pp(0), kvb.pp(1))?,
                                relu: !last,
                            });
                        }
                        Path::Chain(units)
                    };
                    row.push(path);
                }
                fuse.push(row);
            }
        }
        Ok(HrModule { branches, fuse })
    }

    fn forward(&self, xs: Vec<Tensor>, train: bool) -> Result<Vec<Tensor>> {
        let mut ys = Vec::with_capacity(xs.len());
        for (x, branch) in xs.into_iter().zip(&self.branches) {
            let mut h = x;
            for block in branch {
                h = block.forward(&h, train)?;
            }
            ys.push(h);
        }
        if self.fuse.is_empty() {
            return Ok(ys);
        }
        self.fuse
            .iter()
            .map(|row| {
                let mut acc: Option<Tensor> = None;
                for (j, path) in row.iter().enumerate() {
                    let t = path.forward(&ys[j], train)?;
                    acc = Some(match acc {
                        None => t,
                        Some(a) => (a + t)?,
                    });
                }
                acc.expect("non-empty fuse row").relu()
            })
            .collect()
    }
}

/// One entry per output branch of a transition layer.
enum Transition {
    Keep,
    Convert(Unit),
    /// New lower-resolution branch grown from the last existing branch.
    Grow(Vec<Unit>),
}

fn transition(pre: &[usize], cur: &[usize], vb: VarBuilder) -> Result<Vec<Transition>> {
    let mut out = Vec::with_capacity(cur.len());
    for (i, &c) in cur.iter().enumerate() {
        let tvb = vb.pp(i);
        if i < pre.len() {
            if pre[i] != c {
                out.push(Transition::Convert(Unit {
                    cb: ConvBn::new(pre[i], c, 3, 1, tvb.pp(0), tvb.pp(1))?,
                    relu: true,
                }));
            } else {
                out.push(Transition::Keep);
            }
        } else {
            let steps = i + 1 - pre.len();
            let c_last = *pre.last().expect("non-empty previous stage");
            let mut units = Vec::with_capacity(steps);
            for j in 0..steps {
                let c_out = if j == i - pre.len() { c } else { c_last };
                let jvb = tvb.pp(j);
                units.push(Unit {
                    cb: ConvBn::new(c_last, c_out, 3, 2, jvb.pp(0), jvb.pp(1))?,
                    relu: true,
                });
            }
            out.push(Transition::Grow(units));
        }
    }
    Ok(out)
}

fn apply_transition(ts: &[Transition], ys: &[Tensor], train: bool) -> Result<Vec<Tensor>> {
    let last = ys.last().expect("non-empty branch list");
    ts.iter()
        .enumerate()
        .map(|(i, t)| match t {
            Transition::Keep => Ok(ys[i].clone()),
            Transition::Convert(u) => u.forward(&ys[i], train),
            Transition::Grow(units) => {
                let mut h = last.clone();
                for u in units {
                    h = u.forward(&h, train)?;
                }
                Ok(h)
            }
        })
        .collect()
}

pub struct HrNet {
    stem1: ConvBn,
    stem2: ConvBn,
    layer1: Vec<Block>,
    transitions: Vec<Vec<Transition>>,
    stages: Vec<Vec<HrModule>>,
    incre: Vec<Block>,
}

impl HrNet {
    pub fn new(width: Width, max_level: usize, vb: VarBuilder) -> Result<Self> {
        let c = width.base();
        let stem1 = ConvBn::new(3, 64, 3, 2, vb.pp("conv1"), vb.pp("bn1"))?;
        let stem2 = ConvBn::new(64, 64, 3, 2, vb.pp("conv2"), vb.pp("bn2"))?;
        let lvb = vb.pp("layer1");
        let layer1 = (0..4)
            .map(|b| Block::bottleneck(if b == 0 { 64 } else { 256 }, 64, 256, 1, lvb.pp(b)))
            .collect::<Result<Vec<_>>>()?;

        let stage_channels = [vec![c, 2 * c], vec![c, 2 * c, 4 * c], vec![c, 2 * c, 4 * c, 8 * c]];
        let stage_modules = [1, 4, 3];
        let mut pre = vec![256];
        let mut transitions = Vec::new();
        let mut stages = Vec::new();
        for (s, (chs, &n_mod)) in stage_channels.iter().zip(&stage_modules).enumerate() {
            transitions.push(transition(&pre, chs, vb.pp(format!("transition{}", s + 1)))?);
            let svb = vb.pp(format!("stage{}", s + 2));
            let modules = (0..n_mod)
                .map(|m| HrModule::new(chs, svb.pp(m)))
                .collect::<Result<Vec<_>>>()?;
            stages.push(modules);
            pre = chs.clone();
        }

        let ivb = vb.pp("incre_modules");
        let incre = pre
            .iter()
            .enumerate()
            .take(max_level)
            .map(|(i, &ch)| Block::bottleneck(ch, HEAD_PLANES[i], HEAD_PLANES[i] * 4, 1, ivb.pp(i).pp(0)))
            .collect::<Result<Vec<_>>>()?;
        Ok(HrNet {
            stem1,
            stem2,
            layer1,
            transitions,
            stages,
            incre,
        })
    }
}

impl Backbone for HrNet {
    fn forward_levels(&self, xs: &Tensor, train: bool) -> Result<Vec<Option<Tensor>>> {
        let s1 = self.stem1.forward(xs, train)?.relu()?;
        let mut h = self.stem2.forward(&s1, train)?.relu()?;
        for block in &self.layer1 {
            h = block.forward(&h, train)?;
        }
        let mut ys = vec![h];
        for (t, modules) in self.transitions.iter().zip(&self.stages) {
            let mut xs = apply_transition(t, &ys, train)?;
            for m in modules {
                xs = m.forward(xs, train)?;
            }
            ys = xs;
        }
        let mut out = vec![Some(s1)];
        for (y, head) in ys.iter().zip(&self.incre) {
            out.push(Some(head.forward(y, train)?));
        }
        Ok(out)
    }
}
