//! Encoder, generator, discriminators and the oracle classifier.

pub mod layers;
pub mod oracle;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Real, Tape, Var};
use crate::error::{Error, Result};
pub use layers::{BatchNorm, Conv, Fwd, Linear, Mode, Net, RunningStats};
pub use oracle::OracleClassifier;

/// Image geometry shared by both domains of a task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn batch_dims(&self, n: usize) -> [usize; 4] {
        [n, self.channels, self.height, self.width]
    }
}

/// Network widths. Defaults are the desk-scale sizes used by the bundled
/// tasks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Output channels of each stride-2 encoder block.
    pub encoder_channels: Vec<usize>,
    pub res_blocks: usize,
    /// Output channels of each upsampling block; one block per encoder block.
    pub generator_channels: Vec<usize>,
    /// Output channels of each stride-2 discriminator block.
    pub discriminator_channels: Vec<usize>,
    pub oracle_channels: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_channels: vec![8, 16],
            res_blocks: 3,
            generator_channels: vec![16, 8],
            discriminator_channels: vec![8, 16, 16],
            oracle_channels: vec![8, 16],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, image: &ImageShape) -> Result<()> {
        let down = 1usize << self.encoder_channels.len();
        if self.encoder_channels.is_empty() || image.height % down != 0 || image.width % down != 0 {
            return Err(Error::Config(format!(
                "image {}x{} must be divisible by {down} for {} encoder blocks",
                image.height,
                image.width,
                self.encoder_channels.len()
            )));
        }
        if self.generator_channels.len() != self.encoder_channels.len() {
            return Err(Error::Config(
                "generator needs one upsampling block per encoder block".into(),
            ));
        }
        if self.discriminator_channels.is_empty() || self.oracle_channels.is_empty() {
            return Err(Error::Config(
                "discriminator and oracle need at least one block".into(),
            ));
        }
        let widths = [
            &self.encoder_channels,
            &self.generator_channels,
            &self.discriminator_channels,
            &self.oracle_channels,
        ];
        if widths.iter().any(|w| w.contains(&0)) {
            return Err(Error::Config("zero channel width".into()));
        }
        Ok(())
    }
}

fn strided_extent(mut len: usize, blocks: usize) -> usize {
    for _ in 0..blocks {
        len = (len - 1) / 2 + 1;
    }
    len
}

/// Stack of stride-2 conv → batchnorm → relu blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayers {
    pub blocks: Vec<(Conv, BatchNorm)>,
    pub out_shape: ImageShape,
}

impl EncoderLayers {
    pub fn new<T: Real>(
        net: &mut Net<T>,
        prefix: &str,
        image: &ImageShape,
        channels: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut c_in = image.channels;
        let mut blocks = Vec::new();
        for (i, &c) in channels.iter().enumerate() {
            let conv = Conv::new_unbiased(net, &format!("{prefix}conv{i}"), c_in, c, 2, rng);
            let bn = BatchNorm::new(net, &format!("{prefix}bn{i}"), c);
            blocks.push((conv, bn));
            c_in = c;
        }
        let out_shape = ImageShape::new(
            c_in,
            strided_extent(image.height, channels.len()),
            strided_extent(image.width, channels.len()),
        );
        Self { blocks, out_shape }
    }

    pub fn forward<T: Real>(&self, f: &mut Fwd<'_, T>, mut x: Var) -> Result<Var> {
        for (conv, bn) in &self.blocks {
            x = conv.forward(f, x)?;
            x = bn.forward(f, x)?;
            x = f.tape.relu(x)?;
        }
        Ok(x)
    }
}

/// Standalone encoder `E`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel<T> {
    pub net: Net<T>,
    pub layers: EncoderLayers,
    pub image: ImageShape,
}

impl<T: Real> EncoderModel<T> {
    pub fn new(image: ImageShape, channels: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Net::new();
        let layers = EncoderLayers::new(&mut net, "enc.", &image, channels, &mut rng);
        Self { net, layers, image }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, p: &[Var], x: Var, mode: Mode) -> Result<Var> {
        check_image(tape, x, &self.image, "encoder")?;
        let mut f = Fwd {
            tape,
            p,
            stats: self.net.stats_mut(),
            mode,
        };
        self.layers.forward(&mut f, x)
    }
}

fn check_image<T: Real>(tape: &Tape<T>, x: Var, image: &ImageShape, who: &str) -> Result<()> {
    let s = tape.shape(x);
    if s.len() != 4 || s[1..] != [image.channels, image.height, image.width] {
        return Err(Error::Shape(format!(
            "{who}: expected (n, {}, {}, {}), got {s:?}",
            image.channels, image.height, image.width
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock {
    pub conv_a: Conv,
    pub bn_a: BatchNorm,
    pub conv_b: Conv,
    pub bn_b: BatchNorm,
}

impl ResBlock {
    fn forward<T: Real>(&self, f: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        let mut h = self.conv_a.forward(f, x)?;
        h = self.bn_a.forward(f, h)?;
        h = f.tape.relu(h)?;
        h = self.conv_b.forward(f, h)?;
        h = self.bn_b.forward(f, h)?;
        f.tape.add(x, h)
    }
}

/// `G`: concatenated instance features → residual blocks → nearest-neighbor
/// upsampling blocks → conv → tanh.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorModel<T> {
    pub net: Net<T>,
    pub n_instances: usize,
    pub instance_shape: ImageShape,
    pub image: ImageShape,
    pub res: Vec<ResBlock>,
    pub ups: Vec<(Conv, BatchNorm)>,
    pub out: Conv,
}

impl<T: Real> GeneratorModel<T> {
    pub fn new(
        instance_shape: ImageShape,
        n_instances: usize,
        image: ImageShape,
        cfg: &ModelConfig,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Net::new();
        let width = instance_shape.channels * n_instances;
        let res = (0..cfg.res_blocks)
            .map(|i| ResBlock {
                conv_a: Conv::new_unbiased(
                    &mut net,
                    &format!("gen.res{i}.conv_a"),
                    width,
                    width,
                    1,
                    &mut rng,
                ),
                bn_a: BatchNorm::new(&mut net, &format!("gen.res{i}.bn_a"), width),
                conv_b: Conv::new_unbiased(
                    &mut net,
                    &format!("gen.res{i}.conv_b"),
                    width,
                    width,
                    1,
                    &mut rng,
                ),
                bn_b: BatchNorm::new(&mut net, &format!("gen.res{i}.bn_b"), width),
            })
            .collect();
        let mut c_in = width;
        let mut ups = Vec::new();
        for (i, &c) in cfg.generator_channels.iter().enumerate() {
            let conv =
                Conv::new_unbiased(&mut net, &format!("gen.up{i}.conv"), c_in, c, 1, &mut rng);
            let bn = BatchNorm::new(&mut net, &format!("gen.up{i}.bn"), c);
            ups.push((conv, bn));
            c_in = c;
        }
        let out = Conv::new(&mut net, "gen.out", c_in, image.channels, 1, &mut rng);
        Self {
            net,
            n_instances,
            instance_shape,
            image,
            res,
            ups,
            out,
        }
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        p: &[Var],
        instances: &[Var],
        mode: Mode,
    ) -> Result<Var> {
        if instances.len() != self.n_instances {
            return Err(Error::InstanceCount {
                left: instances.len(),
                right: self.n_instances,
            });
        }
        for &v in instances {
            check_image(tape, v, &self.instance_shape, "generator input")?;
        }
        let mut f = Fwd {
            tape,
            p,
            stats: self.net.stats_mut(),
            mode,
        };
        let mut x = if instances.len() == 1 {
            instances[0]
        } else {
            f.tape.concat_channels(instances)?
        };
        for block in &self.res {
            x = block.forward(&mut f, x)?;
        }
        for (conv, bn) in &self.ups {
            x = f.tape.upsample2x(x)?;
            x = conv.forward(&mut f, x)?;
            x = bn.forward(&mut f, x)?;
            x = f.tape.relu(x)?;
        }
        x = self.out.forward(&mut f, x)?;
        f.tape.tanh(x)
    }
}

/// Stride-2 conv → relu blocks and a one-node fully connected head.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorModel<T> {
    pub net: Net<T>,
    pub image: ImageShape,
    pub blocks: Vec<Conv>,
    pub fc: Linear,
}

impl<T: Real> DiscriminatorModel<T> {
    pub fn new(image: ImageShape, channels: &[usize], name: &str, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Net::new();
        let mut c_in = image.channels;
        let blocks: Vec<Conv> = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv::new(&mut net, &format!("{name}.conv{i}"), c_in, c, 2, &mut rng);
                c_in = c;
                conv
            })
            .collect();
        let h = strided_extent(image.height, channels.len());
        let w = strided_extent(image.width, channels.len());
        let fc = Linear::new(&mut net, &format!("{name}.fc"), c_in * h * w, 1, &mut rng);
        Self {
            net,
            image,
            blocks,
            fc,
        }
    }

    /// One logit per image, shape (n, 1).
    pub fn forward(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        check_image(tape, x, &self.image, "discriminator")?;
        let mut stats = Vec::new();
        let mut f = Fwd {
            tape,
            p,
            stats: &mut stats,
            mode: Mode::Eval,
        };
        let mut h = x;
        for conv in &self.blocks {
            h = conv.forward(&mut f, h)?;
            h = f.tape.relu(h)?;
        }
        let flat = f.tape.flatten(h)?;
        self.fc.forward(&mut f, flat)
    }

    /// Zeroes the final fully connected layer.
    pub fn zero_head(&mut self) {
        let (w, b) = (self.fc.w, self.fc.b);
        for idx in [w, b] {
            self.net.params_mut()[idx]
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = T::zero());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{finite_diff_check, Tensor};
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn encoder_quarter_resolution() {
        let mut enc = EncoderModel::<f32>::new(ImageShape::new(3, 32, 32), &[64, 64], 1);
        let mut tape = Tape::new();
        let p = enc.net.bind(&mut tape, false);
        let x = tape.constant(random(&[2, 3, 32, 32], 2).cast());
        let y = enc.forward(&mut tape, &p, x, Mode::Train).unwrap();
        assert_eq!(tape.shape(y), &[2, 64, 8, 8]);
        assert_eq!(enc.layers.out_shape, ImageShape::new(64, 8, 8));
    }

    #[test]
    fn encoder_zero_input_gives_zero_output() {
        let mut enc = EncoderModel::<f32>::new(ImageShape::new(1, 16, 16), &[4, 8], 3);
        let mut tape = Tape::new();
        let p = enc.net.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros([2, 1, 16, 16]));
        let y = enc.forward(&mut tape, &p, x, Mode::Train).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_rejects_wrong_shape() {
        let mut enc = EncoderModel::<f32>::new(ImageShape::new(1, 16, 16), &[4, 8], 3);
        let mut tape = Tape::new();
        let p = enc.net.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros([2, 3, 16, 16]));
        assert!(enc.forward(&mut tape, &p, x, Mode::Train).is_err());
    }

    #[test]
    fn generator_shape_range_and_order_sensitivity() {
        let cfg = ModelConfig {
            encoder_channels: vec![64, 64],
            generator_channels: vec![16, 8],
            ..ModelConfig::default()
        };
        let inst = ImageShape::new(64, 8, 8);
        let mut g = GeneratorModel::<f32>::new(inst, 4, ImageShape::new(3, 32, 32), &cfg, 5);
        let mut tape = Tape::new();
        let p = g.net.bind(&mut tape, false);
        let xs: Vec<Var> = (0..4)
            .map(|i| tape.constant(random(&[2, 64, 8, 8], 10 + i).cast()))
            .collect();
        let y = g.forward(&mut tape, &p, &xs, Mode::Eval).unwrap();
        assert_eq!(tape.shape(y), &[2, 3, 32, 32]);
        assert!(tape
            .value(y)
            .data()
            .iter()
            .all(|v| (-1.0..=1.0).contains(v)));
        let swapped = [xs[1], xs[0], xs[2], xs[3]];
        let y2 = g.forward(&mut tape, &p, &swapped, Mode::Eval).unwrap();
        assert_ne!(tape.value(y), tape.value(y2));
        let err = g.forward(&mut tape, &p, &xs[..3], Mode::Eval).unwrap_err();
        assert!(matches!(err, Error::InstanceCount { left: 3, right: 4 }));
    }

    #[test]
    fn discriminator_batch_and_zero_head() {
        let image = ImageShape::new(1, 16, 16);
        let mut d = DiscriminatorModel::<f32>::new(image, &[4, 8, 8], "d1", 7);
        let mut tape = Tape::new();
        let p = d.net.bind(&mut tape, false);
        let x = tape.constant(random(&[64, 1, 16, 16], 1).cast());
        let y = d.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(y), &[64, 1]);
        d.zero_head();
        let p = d.net.bind(&mut tape, false);
        let y = d.forward(&mut tape, &p, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let prob = tape.sigmoid(y).unwrap();
        assert!(tape.value(prob).data().iter().all(|&v| v == 0.5));
    }

    fn net_check<F>(net: &Net<f64>, mut run: F) -> f64
    where
        F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let params = net.params().to_vec();
        let run = std::cell::RefCell::new(&mut run);
        let r =
            finite_diff_check(|tape, p| (run.borrow_mut())(tape, p), &params, 1e-5, 1e-4).unwrap();
        r.max_rel_err()
    }

    #[test]
    fn encoder_gradients_pass_fd_check() {
        let enc = EncoderModel::<f64>::new(ImageShape::new(2, 8, 8), &[3, 4], 11);
        let x = random(&[2, 2, 8, 8], 12);
        let proj = random(&[2, 4, 2, 2], 13);
        let err = net_check(&enc.net, |tape, p| {
            let mut e = enc.clone();
            let xv = tape.constant(x.clone());
            let y = e.forward(tape, p, xv, Mode::Train)?;
            let pv = tape.constant(proj.clone());
            let z = tape.mul(y, pv)?;
            tape.sum(z)
        });
        assert!(err <= 1e-4, "max rel err {err}");
    }

    #[test]
    fn generator_gradients_pass_fd_check() {
        let cfg = ModelConfig {
            res_blocks: 1,
            generator_channels: vec![3],
            ..ModelConfig::default()
        };
        let g = GeneratorModel::<f64>::new(
            ImageShape::new(2, 4, 4),
            2,
            ImageShape::new(1, 8, 8),
            &cfg,
            21,
        );
        let a = random(&[3, 2, 4, 4], 22);
        let b = random(&[3, 2, 4, 4], 23);
        let proj = random(&[3, 1, 8, 8], 24);
        let err = net_check(&g.net, |tape, p| {
            let mut g = g.clone();
            let xs = [tape.constant(a.clone()), tape.constant(b.clone())];
            let y = g.forward(tape, p, &xs, Mode::Train)?;
            let pv = tape.constant(proj.clone());
            let z = tape.mul(y, pv)?;
            tape.sum(z)
        });
        assert!(err <= 1e-4, "max rel err {err}");
    }

    #[test]
    fn discriminator_gradients_pass_fd_check() {
        let d = DiscriminatorModel::<f64>::new(ImageShape::new(2, 8, 8), &[3, 4], "d", 31);
        let x = random(&[3, 2, 8, 8], 32);
        let err = net_check(&d.net, |tape, p| {
            let xv = tape.constant(x.clone());
            let y = d.forward(tape, p, xv)?;
            tape.bce_with_logits(y, vec![1.0, 0.0, 1.0])
        });
        assert!(err <= 1e-4, "max rel err {err}");
    }

    #[test]
    fn fixed_seed_gives_identical_weights() {
        let a = DiscriminatorModel::<f32>::new(ImageShape::new(1, 16, 16), &[4, 8, 8], "d", 99);
        let b = DiscriminatorModel::<f32>::new(ImageShape::new(1, 16, 16), &[4, 8, 8], "d", 99);
        assert_eq!(a.net, b.net);
        let c = DiscriminatorModel::<f32>::new(ImageShape::new(1, 16, 16), &[4, 8, 8], "d", 100);
        assert_ne!(a.net, c.net);
    }
}
