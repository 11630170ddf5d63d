//! U-shaped encoder/decoder segmentation network and the EMA teacher.
//!
//! With channel widths `c_i = base_width * 2^i`:
//!
//! | block        | op                                   | in -> out            |
//! |--------------|--------------------------------------|----------------------|
//! | `stem`       | 3x3 conv, ReLU                       | in_channels -> c_0   |
//! | `down{i}`    | 3x3 conv stride 2, ReLU              | c_{i-1} -> c_i       |
//! | `enc{i}`     | 3x3 conv, ReLU                       | c_i -> c_i           |
//! | `dec{i}`     | bilinear x2, concat skip, 3x3 conv, ReLU | c_i + c_{i-1} -> c_{i-1} |
//! | `head`       | 1x1 conv                             | c_0 -> num_classes   |
//! | `recon`      | 1x1 conv (optional)                  | c_0 -> in_channels   |
//!
//! for `i = 1..=depth`. Decoder blocks run from `i = depth` down to 1.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    pub depth: usize,
    pub seed: u64,
    /// Adds a 1x1 image-reconstruction branch next to the class head.
    pub recon_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            num_classes: 4,
            base_width: 16,
            depth: 3,
            seed: 0,
            recon_head: false,
        }
    }
}

/// One convolution of the architecture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvSpec {
    fn new(name: String, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            name,
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn numel(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::Config("model depth must be at least 1".into()));
        }
        if self.base_width < 1 {
            return Err(Error::Config("model base_width must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("model needs at least 2 classes".into()));
        }
        if self.in_channels < 1 {
            return Err(Error::Config("model needs at least one input channel".into()));
        }
        Ok(())
    }

    fn width(&self, stage: usize) -> usize {
        self.base_width << stage
    }

    /// Spatial extents must be multiples of this.
    pub fn stride_multiple(&self) -> usize {
        1 << self.depth
    }

    /// Every convolution in execution order.
    pub fn convs(&self) -> Vec<ConvSpec> {
        let mut convs = vec![ConvSpec::new("stem".into(), self.in_channels, self.width(0), 3)];
        for i in 1..=self.depth {
            convs.push(ConvSpec::new(format!("down{i}"), self.width(i - 1), self.width(i), 3));
            convs.push(ConvSpec::new(format!("enc{i}"), self.width(i), self.width(i), 3));
        }
        for i in (1..=self.depth).rev() {
            convs.push(ConvSpec::new(
                format!("dec{i}"),
                self.width(i) + self.width(i - 1),
                self.width(i - 1),
                3,
            ));
        }
        convs.push(ConvSpec::new("head".into(), self.width(0), self.num_classes, 1));
        if self.recon_head {
            convs.push(ConvSpec::new("recon".into(), self.width(0), self.in_channels, 1));
        }
        convs
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = self.stride_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Config(format!(
                "input {h}x{w} must be a positive multiple of {m} (2^depth, depth {})",
                self.depth
            )));
        }
        Ok(())
    }
}

/// Deterministic initialization: Kaiming-normal kernels (fan-in), zero biases.
pub fn init_model(config: &ModelConfig) -> Result<ParamSet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ParamSet::new();
    for conv in config.convs() {
        let fan_in = (conv.in_channels * conv.kernel * conv.kernel) as f64;
        // Output heads are linear; every other conv feeds a ReLU.
        let gain = if conv.kernel == 1 { 1.0 } else { 2.0 };
        let w = Tensor::randn(
            &[conv.out_channels, conv.in_channels, conv.kernel, conv.kernel],
            (gain / fan_in).sqrt(),
            &mut rng,
        );
        params.insert(format!("{}.w", conv.name), w)?;
        params.insert(format!("{}.b", conv.name), Tensor::zeros(&[conv.out_channels]))?;
    }
    Ok(params)
}

#[derive(Debug, Clone, Copy)]
pub struct SegOutput {
    pub logits: Var,
    pub recon: Option<Var>,
}

fn conv(
    g: &mut Graph,
    p: &BoundParams,
    name: &str,
    x: Var,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let w = p.var(&format!("{name}.w"))?;
    let b = p.var(&format!("{name}.b"))?;
    g.conv2d(x, w, b, stride, padding)
}

/// Runs the network on `images` (`[N, in_channels, H, W]`) inside `g`.
pub fn forward(
    g: &mut Graph,
    params: &BoundParams,
    config: &ModelConfig,
    images: Var,
) -> Result<SegOutput> {
    let [_, c, h, w] = g.value(images).dims4()?;
    if c != config.in_channels {
        return Err(Error::Shape(format!(
            "model expects {} input channels, got {c}",
            config.in_channels
        )));
    }
    config.check_input(h, w)?;

    let x = conv(g, params, "stem", images, 1, 1)?;
    let mut skips = vec![g.relu(x)];
    for i in 1..=config.depth {
        let prev = *skips.last().expect("non-empty");
        let x = conv(g, params, &format!("down{i}"), prev, 2, 1)?;
        let x = g.relu(x);
        let x = conv(g, params, &format!("enc{i}"), x, 1, 1)?;
        skips.push(g.relu(x));
    }
    let mut x = skips.pop().expect("depth >= 1");
    for i in (1..=config.depth).rev() {
        let skip = skips.pop().expect("one skip per stage");
        let [_, _, sh, sw] = g.value(skip).dims4()?;
        let up = g.bilinear_resize(x, sh, sw)?;
        let cat = g.concat_channels(&[up, skip])?;
        let y = conv(g, params, &format!("dec{i}"), cat, 1, 1)?;
        x = g.relu(y);
    }
    let logits = conv(g, params, "head", x, 1, 0)?;
    let recon = if config.recon_head {
        Some(conv(g, params, "recon", x, 1, 0)?)
    } else {
        None
    };
    Ok(SegOutput { logits, recon })
}

/// Gradient-free forward pass returning logits.
pub fn predict_logits(params: &ParamSet, config: &ModelConfig, images: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = g.constant(images.clone());
    let out = forward(&mut g, &bound, config, x)?;
    Ok(g.value(out.logits).clone())
}

/// EMA copy of the student, `θ' <- α θ' + (1 - α) θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState {
    pub params: ParamSet,
    pub alpha: f64,
    pub step: u64,
}

impl TeacherState {
    /// A teacher initialized as an exact copy of the student.
    pub fn from_student(student: &ParamSet, alpha: f64) -> Self {
        let mut params = student.clone();
        params.clear_grads();
        TeacherState {
            params,
            alpha,
            step: 0,
        }
    }

    pub fn ema_update(&mut self, student: &ParamSet) -> Result<()> {
        self.params.check_compatible(student)?;
        let a = self.alpha;
        for (t, (_, s)) in self.params.values_mut().zip(student.iter()) {
            for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
                *tv = a * *tv + (1.0 - a) * sv;
            }
        }
        self.step += 1;
        Ok(())
    }
}
