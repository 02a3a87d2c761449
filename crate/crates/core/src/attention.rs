//! Deep attention encoder: region localization, soft rectangular masks,
//! masked cropping, per-region encoding and the label-driven geometric
//! regularizer.
//!
//! A region is a box of fixed half extents `(w, h)` around a predicted center
//! `(x, y)`. Its mask on the integer pixel lattice is
//!
//! ```text
//! M(px, py) = [σ(k(px − left)) − σ(k(px − right))] · [σ(k(py − top)) − σ(k(py − bottom))]
//! ```
//!
//! which tends to the box indicator as `k` grows while staying differentiable
//! in the center.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::tape::window;
use crate::diffcore::{Attrs, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::networks::{EncoderLayers, Fwd, ImageShape, Linear, Mode, ModelConfig, Net};

/// Linear schedule for the mask sharpness.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KAnneal {
    pub start: f64,
    pub end: f64,
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub n_regions: usize,
    /// Sigmoid sharpness.
    pub k: f64,
    pub half_width: f64,
    pub half_height: f64,
    #[serde(default)]
    pub k_anneal: Option<KAnneal>,
}

impl AttentionConfig {
    /// One region, `k = 10`, half extents of a quarter of the image.
    pub fn for_image(image: &ImageShape) -> Self {
        Self {
            n_regions: 1,
            k: 10.0,
            half_width: image.width as f64 / 4.0,
            half_height: image.height as f64 / 4.0,
            k_anneal: None,
        }
    }

    pub fn validate(&self, image: &ImageShape) -> Result<()> {
        if self.n_regions == 0 {
            return Err(Error::Config("n_regions must be at least 1".into()));
        }
        if !(self.k > 0.0) {
            return Err(Error::Config(format!("k must be positive, got {}", self.k)));
        }
        let (wmax, hmax) = (image.width as f64 / 2.0, image.height as f64 / 2.0);
        if !(self.half_width > 0.0 && self.half_width <= wmax) {
            return Err(Error::Config(format!(
                "half_width {} outside (0, {wmax}]",
                self.half_width
            )));
        }
        if !(self.half_height > 0.0 && self.half_height <= hmax) {
            return Err(Error::Config(format!(
                "half_height {} outside (0, {hmax}]",
                self.half_height
            )));
        }
        if let Some(a) = &self.k_anneal {
            if !(a.start > 0.0 && a.end > 0.0) {
                return Err(Error::Config("k_anneal endpoints must be positive".into()));
            }
        }
        Ok(())
    }

    /// Sharpness in effect at a training step.
    pub fn k_at(&self, step: u64) -> f64 {
        match &self.k_anneal {
            None => self.k,
            Some(a) if a.steps == 0 || step >= a.steps => a.end,
            Some(a) => a.start + (a.end - a.start) * step as f64 / a.steps as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionBounds {
    pub left: f64,
    pub right: f64,
    pub top: f64,
    pub bottom: f64,
}

pub fn region_bounds(center: (f64, f64), cfg: &AttentionConfig) -> RegionBounds {
    let (x, y) = center;
    RegionBounds {
        left: x - cfg.half_width,
        right: x + cfg.half_width,
        top: y - cfg.half_height,
        bottom: y + cfg.half_height,
    }
}

/// Soft mask on an `height × width` grid, stored row-major together with its
/// two axis factors.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub x_factor: Vec<f64>,
    pub y_factor: Vec<f64>,
}

impl AttentionMask {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![1.0; height * width],
            x_factor: vec![1.0; width],
            y_factor: vec![1.0; height],
        }
    }
}

/// Builds the mask of `bounds` at integer pixel coordinates.
pub fn make_mask(bounds: &RegionBounds, grid: (usize, usize), k: f64) -> Result<AttentionMask> {
    if !(k > 0.0) {
        return Err(Error::Config(format!(
            "mask sharpness k must be positive, got {k}"
        )));
    }
    let (height, width) = grid;
    let cx = 0.5 * (bounds.left + bounds.right);
    let cy = 0.5 * (bounds.top + bounds.bottom);
    let x_factor = window(width, cx, 0.5 * (bounds.right - bounds.left), k);
    let y_factor = window(height, cy, 0.5 * (bounds.bottom - bounds.top), k);
    let values = y_factor
        .iter()
        .flat_map(|&my| x_factor.iter().map(move |&mx| my * mx))
        .collect();
    Ok(AttentionMask {
        height,
        width,
        values,
        x_factor,
        y_factor,
    })
}

/// `image ∘ mask` for a (c, h, w) image, mask broadcast over channels.
pub fn crop<T: Real>(image: &Tensor<T>, mask: &AttentionMask) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 || s[1] != mask.height || s[2] != mask.width {
        return Err(Error::Shape(format!(
            "crop: image {s:?} vs mask {}x{}",
            mask.height, mask.width
        )));
    }
    let plane = mask.height * mask.width;
    let data = image
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v * T::from_f64c(mask.values[i % plane]))
        .collect();
    Tensor::new(s.to_vec(), data)
}

/// Predicted centers for a batch, shape (n, 2·n_regions), laid out as
/// `x0, y0, x1, y1, …` per sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionCenters {
    pub var: Var,
    pub n_regions: usize,
}

impl RegionCenters {
    pub fn center<T: Real>(&self, tape: &Tape<T>, sample: usize, region: usize) -> (f64, f64) {
        let d = tape.value(self.var).data();
        let base = sample * 2 * self.n_regions + 2 * region;
        (d[base].to_f64c(), d[base + 1].to_f64c())
    }
}

/// Ordered per-region encodings `E(X ∘ M_i)` for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceFeatures {
    pub centers: Option<RegionCenters>,
    pub instances: Vec<Var>,
}

impl InstanceFeatures {
    /// Same values as tape constants, cut off from every gradient path.
    pub fn detached<T: Real>(&self, tape: &mut Tape<T>) -> Self {
        let mut cut = |v: Var| {
            let val = tape.value(v).clone();
            tape.constant(val)
        };
        Self {
            centers: self.centers.as_ref().map(|c| RegionCenters {
                var: cut(c.var),
                ..*c
            }),
            instances: self.instances.iter().map(|&v| cut(v)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// Encoder `E`, localization head `f_loc` and the auxiliary classifier head
/// used by the geometric regularizer, all in one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct DaeModel<T> {
    pub net: Net<T>,
    pub encoder: EncoderLayers,
    pub loc: Linear,
    pub aux: Linear,
    pub cfg: AttentionConfig,
    pub image: ImageShape,
    pub classes: usize,
    /// Skip localization and use the whole image as the single region.
    pub identity_mask: bool,
}

impl<T: Real> DaeModel<T> {
    pub fn new(
        image: ImageShape,
        cfg: AttentionConfig,
        model: &ModelConfig,
        classes: usize,
        identity_mask: bool,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate(&image)?;
        model.validate(&image)?;
        if classes == 0 {
            return Err(Error::Config("class count must be positive".into()));
        }
        let cfg = if identity_mask {
            AttentionConfig {
                n_regions: 1,
                ..cfg
            }
        } else {
            cfg
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Net::new();
        let encoder = EncoderLayers::new(
            &mut net,
            "dae.enc.",
            &image,
            &model.encoder_channels,
            &mut rng,
        );
        let fo = encoder.out_shape;
        let loc = Linear::new(&mut net, "dae.loc", fo.numel(), 2 * cfg.n_regions, &mut rng);
        let aux = Linear::new(
            &mut net,
            "dae.aux",
            fo.channels * cfg.n_regions,
            classes,
            &mut rng,
        );
        Ok(Self {
            net,
            encoder,
            loc,
            aux,
            cfg,
            image,
            classes,
            identity_mask,
        })
    }

    pub fn instance_shape(&self) -> ImageShape {
        self.encoder.out_shape
    }

    pub fn n_regions(&self) -> usize {
        self.cfg.n_regions
    }

    /// Zeroes the last localization layer so every center sits at the image
    /// midpoint.
    pub fn zero_loc_head(&mut self) {
        for idx in [self.loc.w, self.loc.b] {
            self.net.params_mut()[idx]
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = T::zero());
        }
    }

    /// `E(X)` for a batch.
    pub fn encode(&mut self, tape: &mut Tape<T>, p: &[Var], x: Var, mode: Mode) -> Result<Var> {
        let mut f = Fwd {
            tape,
            p,
            stats: self.net.stats_mut(),
            mode,
        };
        self.encoder.forward(&mut f, x)
    }

    /// Region centers from an encoder feature map, squashed by a scaled tanh
    /// into `[w, W − w] × [h, H − h]`.
    pub fn localize(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        feature_map: Var,
    ) -> Result<RegionCenters> {
        let s = tape.shape(feature_map).to_vec();
        let fo = self.encoder.out_shape;
        if s.len() != 4 || s[1..] != [fo.channels, fo.height, fo.width] {
            return Err(Error::Shape(format!(
                "localize: feature map {s:?} does not match encoder output {fo:?}"
            )));
        }
        let n = s[0];
        let mut stats = Vec::new();
        let mut f = Fwd {
            tape,
            p,
            stats: &mut stats,
            mode: Mode::Eval,
        };
        let flat = f.tape.flatten(feature_map)?;
        let raw = self.loc.forward(&mut f, flat)?;
        let squashed = tape.tanh(raw)?;
        let (w, h) = (self.image.width as f64, self.image.height as f64);
        let k = self.cfg.n_regions;
        let mut mid = Vec::with_capacity(n * 2 * k);
        let mut range = Vec::with_capacity(n * 2 * k);
        for _ in 0..n * k {
            mid.extend([T::from_f64c(w / 2.0), T::from_f64c(h / 2.0)]);
            range.extend([
                T::from_f64c(w / 2.0 - self.cfg.half_width),
                T::from_f64c(h / 2.0 - self.cfg.half_height),
            ]);
        }
        let range = tape.constant(Tensor::new([n, 2 * k], range)?);
        let mid = tape.constant(Tensor::new([n, 2 * k], mid)?);
        let scaled = tape.mul(squashed, range)?;
        let var = tape.add(scaled, mid)?;
        Ok(RegionCenters { var, n_regions: k })
    }

    /// `R_i = X ∘ M_i` on the tape. `centers` has shape (n, 2).
    pub fn masked_region(&self, tape: &mut Tape<T>, x: Var, centers: Var, k: f64) -> Result<Var> {
        let mask = tape.apply(
            Attrs::SoftBoxMask {
                half_w: T::from_f64c(self.cfg.half_width),
                half_h: T::from_f64c(self.cfg.half_height),
                k: T::from_f64c(k),
                height: self.image.height,
                width: self.image.width,
            },
            &[centers],
        )?;
        let mask = if self.image.channels == 1 {
            mask
        } else {
            let copies = vec![mask; self.image.channels];
            tape.concat_channels(&copies)?
        };
        tape.mul(x, mask)
    }

    /// `{E(R_i)}` for a batch of images at mask sharpness `k`.
    pub fn encode_instances(
        &mut self,
        tape: &mut Tape<T>,
        p: &[Var],
        x: Var,
        k: f64,
        mode: Mode,
    ) -> Result<InstanceFeatures> {
        let s = tape.shape(x);
        if s.len() != 4 || s[1..] != [self.image.channels, self.image.height, self.image.width] {
            return Err(Error::Shape(format!(
                "encode_instances: expected (n, {}, {}, {}), got {s:?}",
                self.image.channels, self.image.height, self.image.width
            )));
        }
        let fmap = self.encode(tape, p, x, mode)?;
        if self.identity_mask {
            return Ok(InstanceFeatures {
                centers: None,
                instances: vec![fmap],
            });
        }
        let centers = self.localize(tape, p, fmap)?;
        let mut instances = Vec::with_capacity(self.cfg.n_regions);
        for i in 0..self.cfg.n_regions {
            let c = if self.cfg.n_regions == 1 {
                centers.var
            } else {
                tape.narrow(centers.var, 1, 2 * i, 2)?
            };
            let region = self.masked_region(tape, x, c, k)?;
            instances.push(self.encode(tape, p, region, mode)?);
        }
        Ok(InstanceFeatures {
            centers: Some(centers),
            instances,
        })
    }

    /// Auxiliary head on globally pooled, concatenated instance features.
    pub fn aux_logits(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        inst: &InstanceFeatures,
    ) -> Result<Var> {
        if inst.len() != self.cfg.n_regions {
            return Err(Error::InstanceCount {
                left: inst.len(),
                right: self.cfg.n_regions,
            });
        }
        let mut pooled = Vec::with_capacity(inst.len());
        for &v in &inst.instances {
            let g = tape.global_avg_pool(v)?;
            let s = tape.shape(g).to_vec();
            pooled.push(tape.reshape(g, [s[0], s[1], 1, 1])?);
        }
        let cat = if pooled.len() == 1 {
            pooled[0]
        } else {
            tape.concat_channels(&pooled)?
        };
        let flat = tape.flatten(cat)?;
        let mut stats = Vec::new();
        let mut f = Fwd {
            tape,
            p,
            stats: &mut stats,
            mode: Mode::Eval,
        };
        self.aux.forward(&mut f, flat)
    }

    /// Softmax cross-entropy of the auxiliary head against the image labels.
    pub fn geo_regularizer(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        inst: &InstanceFeatures,
        labels: &[usize],
    ) -> Result<Var> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: self.classes,
            });
        }
        let logits = self.aux_logits(tape, p, inst)?;
        tape.softmax_cross_entropy(logits, labels.to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::finite_diff_check;
    use rand::Rng;

    fn cfg(n: usize, k: f64, w: f64, h: f64) -> AttentionConfig {
        AttentionConfig {
            n_regions: n,
            k,
            half_width: w,
            half_height: h,
            k_anneal: None,
        }
    }

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
    fn bounds_substitution() {
        let c = cfg(1, 10.0, 8.0, 10.0);
        let b = region_bounds((16.0, 10.0), &c);
        assert_eq!((b.left, b.right), (8.0, 24.0));
        assert_eq!((b.top, b.bottom), (0.0, 20.0));
        let tiny = region_bounds((3.0, 4.0), &cfg(1, 10.0, 0.5, 0.5));
        assert_eq!(tiny.right - tiny.left, 1.0);
        assert_eq!(tiny.bottom - tiny.top, 1.0);
    }

    #[test]
    fn mask_limits_at_k50() {
        let b = region_bounds((8.0, 8.0), &cfg(1, 50.0, 4.0, 4.0));
        let m = make_mask(&b, (16, 16), 50.0).unwrap();
        assert!((m.at(8, 8) - 1.0).abs() < 1e-3);
        assert!(m.at(2, 2) <= 1e-3);
        assert!(m.at(13, 13) <= 1e-3);
        // left edge at x = 4, y deep inside
        assert!((m.at(8, 4) - 0.5).abs() < 1e-3);
        assert!(m.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn mask_rejects_nonpositive_k() {
        let b = region_bounds((8.0, 8.0), &cfg(1, 1.0, 4.0, 4.0));
        assert!(make_mask(&b, (16, 16), 0.0).is_err());
        assert!(make_mask(&b, (16, 16), -1.0).is_err());
    }

    #[test]
    fn crop_identity_zero_and_oracle() {
        let img = random(&[2, 4, 4], 1);
        let ones = AttentionMask::ones(4, 4);
        assert_eq!(crop(&img, &ones).unwrap(), img);
        let zeros = AttentionMask {
            values: vec![0.0; 16],
            ..AttentionMask::ones(4, 4)
        };
        assert!(crop(&img, &zeros).unwrap().data().iter().all(|&v| v == 0.0));
        let m = make_mask(
            &region_bounds((1.7, 2.2), &cfg(1, 3.0, 1.0, 1.5)),
            (4, 4),
            3.0,
        )
        .unwrap();
        let out = crop(&img, &m).unwrap();
        for c in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    let e = img.data()[(c * 4 + y) * 4 + x] * m.at(y, x);
                    assert!((out.data()[(c * 4 + y) * 4 + x] - e).abs() < 1e-6);
                }
            }
        }
        assert!(crop(&img, &AttentionMask::ones(3, 4)).is_err());
    }

    #[test]
    fn mask_gradient_wrt_center_matches_fd() {
        // near the border, so the sum depends on placement
        let centers = Tensor::from_f64([2, 2], &[2.3, 13.6, 14.2, 1.9]).unwrap();
        let r = finite_diff_check(
            |tape, p| {
                let m = tape.apply(
                    Attrs::SoftBoxMask {
                        half_w: 4.0,
                        half_h: 3.0,
                        k: 10.0,
                        height: 16,
                        width: 16,
                    },
                    &[p[0]],
                )?;
                tape.sum(m)
            },
            &[centers],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed(), "{}", r.max_rel_err());
    }

    fn small_model(n: usize, identity: bool) -> DaeModel<f64> {
        let image = ImageShape::new(1, 16, 16);
        let model = ModelConfig::default();
        DaeModel::new(image, cfg(n, 10.0, 4.0, 4.0), &model, 10, identity, 3).unwrap()
    }

    #[test]
    fn zeroed_head_centers_at_midpoint() {
        let mut dae = small_model(4, false);
        dae.zero_loc_head();
        let mut tape = Tape::new();
        let p = dae.net.bind(&mut tape, false);
        let x = tape.constant(random(&[3, 1, 16, 16], 2));
        let inst = dae
            .encode_instances(&mut tape, &p, x, 10.0, Mode::Eval)
            .unwrap();
        let c = inst.centers.unwrap();
        for s in 0..3 {
            for r in 0..4 {
                assert_eq!(c.center(&tape, s, r), (8.0, 8.0));
            }
        }
    }

    #[test]
    fn centers_stay_in_admissible_box() {
        let mut dae = small_model(4, false);
        // blow up the head so tanh saturates
        for idx in [dae.loc.w] {
            dae.net.params_mut()[idx]
                .data_mut()
                .iter_mut()
                .for_each(|v| *v *= 50.0);
        }
        let mut tape = Tape::new();
        let p = dae.net.bind(&mut tape, false);
        let x = tape.constant(random(&[5, 1, 16, 16], 4));
        let fmap = dae.encode(&mut tape, &p, x, Mode::Train).unwrap();
        let c = dae.localize(&mut tape, &p, fmap).unwrap();
        assert_eq!(tape.shape(c.var), &[5, 8]);
        for s in 0..5 {
            for r in 0..4 {
                let (x, y) = c.center(&tape, s, r);
                assert!((4.0..=12.0).contains(&x) && (4.0..=12.0).contains(&y));
            }
        }
    }

    #[test]
    fn instance_shapes_and_purity() {
        let mut dae = small_model(4, false);
        let mut tape = Tape::new();
        let p = dae.net.bind(&mut tape, false);
        let img = random(&[2, 1, 16, 16], 5);
        let x = tape.constant(img.clone());
        let a = dae
            .encode_instances(&mut tape, &p, x, 10.0, Mode::Eval)
            .unwrap();
        assert_eq!(a.len(), 4);
        for &v in &a.instances {
            assert_eq!(tape.shape(v), &[2, 16, 4, 4]);
        }
        let y = tape.constant(img);
        let b = dae
            .encode_instances(&mut tape, &p, y, 10.0, Mode::Eval)
            .unwrap();
        for (&u, &v) in a.instances.iter().zip(&b.instances) {
            assert_eq!(tape.value(u), tape.value(v));
        }
    }

    #[test]
    fn identity_mask_instance_equals_encoding() {
        let mut dae = small_model(1, true);
        let mut tape = Tape::new();
        let p = dae.net.bind(&mut tape, false);
        let x = tape.constant(random(&[2, 1, 16, 16], 6));
        let inst = dae
            .encode_instances(&mut tape, &p, x, 10.0, Mode::Eval)
            .unwrap();
        let e = dae.encode(&mut tape, &p, x, Mode::Eval).unwrap();
        assert_eq!(inst.len(), 1);
        assert_eq!(tape.value(inst.instances[0]), tape.value(e));
    }

    #[test]
    fn inference_mode_is_batch_independent() {
        let mut dae = small_model(2, false);
        let batch = random(&[4, 1, 16, 16], 7);
        let mut tape = Tape::new();
        let p = dae.net.bind(&mut tape, false);
        let x = tape.constant(batch.clone());
        let full = dae
            .encode_instances(&mut tape, &p, x, 10.0, Mode::Eval)
            .unwrap();
        let single = tape.constant(Tensor::stack(&[batch.outer(2).unwrap()]).unwrap());
        let one = dae
            .encode_instances(&mut tape, &p, single, 10.0, Mode::Eval)
            .unwrap();
        for (&a, &b) in full.instances.iter().zip(&one.instances) {
            let row = tape.value(a).outer(2).unwrap();
            let alone = tape.value(b).outer(0).unwrap();
            assert!(row.max_abs_diff(&alone) < 1e-12);
        }
    }

    #[test]
    fn geo_regularizer_uniform_and_oracle() {
        let mut dae = small_model(2, false);
        // zero aux head: uniform logits
        for idx in [dae.aux.w, dae.aux.b] {
            dae.net.params_mut()[idx]
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let p = dae.net.bind(&mut tape, false);
        let x = tape.constant(random(&[3, 1, 16, 16], 8));
        let inst = dae
            .encode_instances(&mut tape, &p, x, 10.0, Mode::Eval)
            .unwrap();
        let l = dae
            .geo_regularizer(&mut tape, &p, &inst, &[0, 4, 9])
            .unwrap();
        assert!((tape.value(l).item() - 10f64.ln()).abs() < 1e-12);
        assert!(matches!(
            dae.geo_regularizer(&mut tape, &p, &inst, &[0, 10, 1]),
            Err(Error::LabelOutOfRange { label: 10, .. })
        ));

        // random head against a direct cross-entropy evaluation
        let dae = small_model(2, false);
        let mut dae = dae;
        let mut tape = Tape::new();
        let p = dae.net.bind(&mut tape, false);
        let x = tape.constant(random(&[3, 1, 16, 16], 9));
        let inst = dae
            .encode_instances(&mut tape, &p, x, 10.0, Mode::Eval)
            .unwrap();
        let labels = [3, 1, 7];
        let l = dae.geo_regularizer(&mut tape, &p, &inst, &labels).unwrap();
        let logits = dae.aux_logits(&mut tape, &p, &inst).unwrap();
        let z = tape.value(logits).data().to_vec();
        let mut expect = 0.0;
        for (s, &y) in labels.iter().enumerate() {
            let row = &z[s * 10..(s + 1) * 10];
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            expect += lse - row[y];
        }
        expect /= 3.0;
        assert!((tape.value(l).item() - expect).abs() < 1e-6);
    }

    #[test]
    fn geo_regularizer_vanishes_with_margin() {
        let logits_loss = |margin: f64| {
            let mut tape = Tape::<f64>::new();
            let mut z = vec![0.0; 10];
            z[2] = margin;
            let v = tape.constant(Tensor::new([1, 10], z).unwrap());
            let l = tape.softmax_cross_entropy(v, vec![2]).unwrap();
            tape.value(l).item()
        };
        assert!(logits_loss(5.0) > logits_loss(20.0));
        assert!(logits_loss(40.0) < 1e-15);
    }

    #[test]
    fn localization_weights_receive_gradient() {
        let dae = small_model(1, false);
        let x = random(&[2, 1, 16, 16], 10);
        let loc_w = dae.loc.w;
        let mut tape = Tape::new();
        let p = dae.net.bind(&mut tape, true);
        let mut d = dae.clone();
        let xv = tape.constant(x);
        let inst = d
            .encode_instances(&mut tape, &p, xv, 10.0, Mode::Train)
            .unwrap();
        let s = tape.sum(inst.instances[0]).unwrap();
        tape.backward(s).unwrap();
        let g = tape.grad(p[loc_w]).unwrap();
        assert!(g.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn k_anneal_is_linear() {
        let mut c = cfg(1, 10.0, 4.0, 4.0);
        assert_eq!(c.k_at(500), 10.0);
        c.k_anneal = Some(KAnneal {
            start: 10.0,
            end: 50.0,
            steps: 100,
        });
        assert_eq!(c.k_at(0), 10.0);
        assert_eq!(c.k_at(50), 30.0);
        assert_eq!(c.k_at(1000), 50.0);
    }

    #[test]
    fn config_validation() {
        let image = ImageShape::new(1, 16, 16);
        assert!(cfg(0, 10.0, 4.0, 4.0).validate(&image).is_err());
        assert!(cfg(1, 0.0, 4.0, 4.0).validate(&image).is_err());
        assert!(cfg(1, 10.0, 9.0, 4.0).validate(&image).is_err());
        assert!(cfg(1, 10.0, 8.0, 8.0).validate(&image).is_ok());
    }
}
