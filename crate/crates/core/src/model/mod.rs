//! EffNet classifier over channel images, with class activation maps.

pub mod layers;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::ChannelImage;
use crate::error::{Error, Result};
use crate::param::{join, Param, Parameterized};
pub use layers::{BatchNorm, Conv2d, ConvBnAct, FusedMbConv, Geometry};

pub const NEGATIVE: usize = 0;
pub const POSITIVE: usize = 1;

/// Stage layout of the trunk. The default is the full five-stage network:
/// 3x3 stem (5 -> 64), three expansion-1 fused blocks, seven expansion-4
/// fused blocks, a 1x1 head (64 -> 1280), global average pooling and a
/// 1280 -> 2 classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EffNetSpec {
    pub in_channels: usize,
    pub width: usize,
    pub stage1_layers: usize,
    pub stage2_layers: usize,
    pub expansion: usize,
    pub head_channels: usize,
    pub classes: usize,
}

impl Default for EffNetSpec {
    fn default() -> Self {
        Self {
            in_channels: 5,
            width: 64,
            stage1_layers: 3,
            stage2_layers: 7,
            expansion: 4,
            head_channels: 1280,
            classes: 2,
        }
    }
}

/// Forward results kept for explanation: stage-3 feature maps and logits.
pub struct Inference {
    /// `[head_channels, B * l * l]`
    pub features: Array2<f64>,
    /// `[B, classes]`
    pub logits: Array2<f64>,
}

struct HeadCache {
    pooled: Array2<f64>,
    geo: Geometry,
}

pub struct EffNet {
    pub spec: EffNetSpec,
    pub stem: ConvBnAct,
    pub stage1: Vec<FusedMbConv>,
    pub stage2: Vec<FusedMbConv>,
    pub head: ConvBnAct,
    /// `[classes, head_channels]`
    pub fc_weight: Param,
    pub fc_bias: Param,
    cache: Option<HeadCache>,
}

impl Clone for EffNet {
    fn clone(&self) -> Self {
        Self {
            spec: self.spec,
            stem: self.stem.clone(),
            stage1: self.stage1.clone(),
            stage2: self.stage2.clone(),
            head: self.head.clone(),
            fc_weight: self.fc_weight.clone(),
            fc_bias: self.fc_bias.clone(),
            cache: None,
        }
    }
}

impl std::fmt::Debug for EffNet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EffNet").field("spec", &self.spec).finish_non_exhaustive()
    }
}

impl EffNet {
    pub fn new<R: Rng + ?Sized>(spec: EffNetSpec, rng: &mut R) -> Self {
        let w = spec.width;
        Self {
            spec,
            stem: ConvBnAct::new(spec.in_channels, w, 3, true, rng),
            stage1: (0..spec.stage1_layers).map(|_| FusedMbConv::new(w, 1, rng)).collect(),
            stage2: (0..spec.stage2_layers)
                .map(|_| FusedMbConv::new(w, spec.expansion, rng))
                .collect(),
            head: ConvBnAct::new(w, spec.head_channels, 1, true, rng),
            fc_weight: Param::normal(
                &[spec.classes, spec.head_channels],
                1.0 / (spec.head_channels as f64).sqrt(),
                rng,
            ),
            fc_bias: Param::zeros(&[spec.classes]),
            cache: None,
        }
    }

    fn check_input(&self, input: &Array2<f64>, geo: Geometry) -> Result<()> {
        if input.dim() != (self.spec.in_channels, geo.columns()) || geo.side < 2 {
            return Err(Error::Shape(format!(
                "input {:?} does not fit {} channels of {} images of side {} (side must be >= 2)",
                input.dim(),
                self.spec.in_channels,
                geo.batch,
                geo.side
            )));
        }
        Ok(())
    }

    fn pool(features: &Array2<f64>, geo: Geometry) -> Array2<f64> {
        let area = geo.area() as f64;
        let mut pooled = Array2::zeros((features.nrows(), geo.batch));
        for (k, row) in features.axis_iter(Axis(0)).enumerate() {
            let row = row.as_slice().expect("contiguous rows");
            for (b, chunk) in row.chunks_exact(geo.area()).enumerate() {
                pooled[[k, b]] = chunk.iter().sum::<f64>() / area;
            }
        }
        pooled
    }

    fn classify(&self, pooled: &Array2<f64>) -> Array2<f64> {
        let mut logits = pooled.t().dot(&self.fc_weight.mat().t());
        logits += &self.fc_bias.vec();
        logits
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
        self.stem.clear_cache();
        for block in self.stage1.iter_mut().chain(self.stage2.iter_mut()) {
            block.clear_cache();
        }
        self.head.clear_cache();
    }

    /// Training-mode forward: batch statistics, caches for [`Self::backward`].
    pub fn forward_train(&mut self, input: &Array2<f64>, geo: Geometry) -> Result<Array2<f64>> {
        self.check_input(input, geo)?;
        let mut x = self.stem.forward_train(input, geo);
        for block in self.stage1.iter_mut().chain(self.stage2.iter_mut()) {
            x = block.forward_train(x, geo);
        }
        let features = self.head.forward_train(&x, geo);
        drop(x);
        let pooled = Self::pool(&features, geo);
        let logits = self.classify(&pooled);
        self.cache = Some(HeadCache { pooled, geo });
        Ok(logits)
    }

    /// Accumulates parameter gradients for `dlogits` (`[B, classes]`) and
    /// returns the gradient with respect to the input.
    pub fn backward(&mut self, dlogits: &Array2<f64>) -> Array2<f64> {
        let HeadCache { pooled, geo } = self.cache.take().expect("backward without forward_train");
        general_mat_mul(1.0, &dlogits.t(), &pooled.t(), 1.0, &mut self.fc_weight.grad_mat_mut());
        self.fc_bias
            .grad_vec_mut()
            .scaled_add(1.0, &dlogits.sum_axis(Axis(0)));
        let dpooled = self.fc_weight.mat().t().dot(&dlogits.t());
        let area = geo.area();
        let mut dfeat = Array2::zeros((pooled.nrows(), geo.columns()));
        for (k, mut row) in dfeat.axis_iter_mut(Axis(0)).enumerate() {
            let row = row.as_slice_mut().expect("contiguous rows");
            for (b, chunk) in row.chunks_exact_mut(area).enumerate() {
                chunk.fill(dpooled[[k, b]] / area as f64);
            }
        }
        let mut d = self.head.backward(dfeat);
        for block in self.stage2.iter_mut().rev().chain(self.stage1.iter_mut().rev()) {
            d = block.backward(d);
        }
        self.stem.backward(d)
    }

    /// Inference-mode forward with running statistics.
    pub fn infer(&self, input: &Array2<f64>, geo: Geometry) -> Result<Inference> {
        self.check_input(input, geo)?;
        let mut x = self.stem.infer(input.view(), geo);
        for block in self.stage1.iter().chain(&self.stage2) {
            x = block.infer(x, geo);
        }
        let features = self.head.infer(x.view(), geo);
        let logits = self.classify(&Self::pool(&features, geo));
        Ok(Inference { features, logits })
    }

    pub fn logits(&self, input: &Array2<f64>, geo: Geometry) -> Result<Array2<f64>> {
        Ok(self.infer(input, geo)?.logits)
    }

    /// Logits of a single image using the given input channels.
    pub fn forward_image(&self, image: &ChannelImage, channels: &[usize]) -> Result<[f64; 2]> {
        let (input, geo) = stack_images(std::slice::from_ref(image), channels)?;
        let logits = self.logits(&input, geo)?;
        Ok([logits[[0, NEGATIVE]], logits[[0, POSITIVE]]])
    }

    /// Class activation map: the classifier weights of `class` applied to
    /// every spatial position of the stage-3 features.
    pub fn cam(&self, image: &ChannelImage, channels: &[usize], class: usize) -> Result<CamMap> {
        let (input, geo) = stack_images(std::slice::from_ref(image), channels)?;
        let inf = self.infer(&input, geo)?;
        Ok(cam_from_features(
            inf.features.view(),
            self.fc_weight.mat().row(class).as_slice().expect("contiguous"),
            geo.side,
            class,
        ))
    }
}

impl Parameterized for EffNet {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.stem.visit_params(&join(prefix, "stem"), f);
        for (i, b) in self.stage1.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &format!("stage1.{i}")), f);
        }
        for (i, b) in self.stage2.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &format!("stage2.{i}")), f);
        }
        self.head.visit_params(&join(prefix, "head"), f);
        f(&join(prefix, "fc.weight"), &mut self.fc_weight);
        f(&join(prefix, "fc.bias"), &mut self.fc_bias);
    }
}

/// Packs images (all of the same side) into a `[C, B * l * l]` input,
/// keeping only `channels` in the given order.
pub fn stack_images(images: &[ChannelImage], channels: &[usize]) -> Result<(Array2<f64>, Geometry)> {
    let side = images
        .first()
        .map(ChannelImage::len)
        .ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let geo = Geometry {
        batch: images.len(),
        side,
    };
    let area = geo.area();
    let mut input = Array2::zeros((channels.len(), geo.columns()));
    for (b, img) in images.iter().enumerate() {
        if img.len() != side || img.data.shape()[0] <= channels.iter().copied().max().unwrap_or(0) {
            return Err(Error::Shape(format!(
                "image {b} has shape {:?}, expected side {side}",
                img.data.shape()
            )));
        }
        for (row, &c) in channels.iter().enumerate() {
            let src = img.channel(c);
            let mut dst = input.row_mut(row);
            for (k, v) in src.iter().enumerate() {
                dst[b * area + k] = *v;
            }
        }
    }
    Ok((input, geo))
}

/// Softmax probability of the positive class.
pub fn predict_score(logits: [f64; 2]) -> f64 {
    // 1 / (1 + exp(neg - pos)) is the two-class softmax
    1.0 / (1.0 + (logits[NEGATIVE] - logits[POSITIVE]).exp())
}

/// Mean two-class cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let batch = logits.nrows() as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for (b, row) in logits.axis_iter(Axis(0)).enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + z.ln();
        loss += log_z - row[labels[b]];
        for (c, v) in row.iter().enumerate() {
            let p = (v - log_z).exp();
            grad[[b, c]] = (p - f64::from(u8::from(c == labels[b]))) / batch;
        }
    }
    (loss / batch, grad)
}

/// `l x l` class activation map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CamMap {
    pub values: Array2<f64>,
    pub class: usize,
}

impl CamMap {
    pub fn mean(&self) -> f64 {
        self.values.mean().unwrap_or(0.0)
    }
}

/// `sum_k weights[k] * features[k, :]` for a single image.
pub fn cam_from_features(features: ArrayView2<f64>, weights: &[f64], side: usize, class: usize) -> CamMap {
    let flat = ndarray::ArrayView1::from(weights).dot(&features);
    CamMap {
        values: flat.into_shape_with_order((side, side)).expect("single image"),
        class,
    }
}

/// Per-slot importance: row sum plus column sum, counting the diagonal
/// once. PAD slots are `None`.
pub fn link_importance(map: &CamMap, pad_count: usize) -> Vec<Option<f64>> {
    let rows = map.values.sum_axis(Axis(1));
    let cols = map.values.sum_axis(Axis(0));
    (0..map.values.nrows())
        .map(|i| (i >= pad_count).then(|| rows[i] + cols[i] - map.values[[i, i]]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::{array, Array3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> EffNetSpec {
        EffNetSpec {
            in_channels: 5,
            width: 4,
            stage1_layers: 1,
            stage2_layers: 1,
            expansion: 2,
            head_channels: 6,
            classes: 2,
        }
    }

    fn random_image(l: usize, rng: &mut ChaCha8Rng) -> ChannelImage {
        ChannelImage {
            data: Array3::from_shape_fn((5, l, l), |_| rng.gen_range(-1.0..1.0)),
            pad_count: 0,
        }
    }

    const ALL: [usize; 5] = [0, 1, 2, 3, 4];

    #[test]
    fn zero_network_outputs_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = EffNet::new(tiny(), &mut rng);
        net.visit_params("", &mut |_, p| {
            if p.trainable {
                p.value.fill(0.0)
            }
        });
        net.fc_bias.value = vec![0.1, -0.2];
        let logits = net.forward_image(&random_image(4, &mut rng), &ALL).unwrap();
        assert_eq!(logits, [0.1, -0.2]);
    }

    #[test]
    fn inference_is_deterministic_and_batch_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = EffNet::new(tiny(), &mut rng);
        let imgs: Vec<_> = (0..4).map(|_| random_image(5, &mut rng)).collect();
        let (input, geo) = stack_images(&imgs, &ALL).unwrap();
        let batched = net.logits(&input, geo).unwrap();
        assert_eq!(batched, net.logits(&input, geo).unwrap());
        for (b, img) in imgs.iter().enumerate() {
            let one = net.forward_image(img, &ALL).unwrap();
            assert_relative_eq!(one[0], batched[[b, 0]], epsilon = 1e-6, max_relative = 1e-6);
            assert_relative_eq!(one[1], batched[[b, 1]], epsilon = 1e-6, max_relative = 1e-6);
        }
    }

    #[test]
    fn shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = EffNet::new(tiny(), &mut rng);
        let img = random_image(4, &mut rng);
        assert!(net.forward_image(&img, &[0, 1]).is_err());
        let one = random_image(1, &mut rng);
        assert!(net.forward_image(&one, &ALL).is_err());
    }

    #[test]
    fn feature_maps_keep_spatial_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = EffNet::new(tiny(), &mut rng);
        let img = random_image(7, &mut rng);
        let (input, geo) = stack_images(std::slice::from_ref(&img), &ALL).unwrap();
        let inf = net.infer(&input, geo).unwrap();
        assert_eq!(inf.features.dim(), (6, 49));
    }

    #[test]
    fn score_examples() {
        assert_eq!(predict_score([0.0, 0.0]), 0.5);
        assert_relative_eq!(predict_score([0.0, 3f64.ln()]), 0.75, epsilon = 1e-12);
        assert!(predict_score([0.0, 1.0]) < predict_score([0.0, 1.1]));
        assert!((0.0..=1.0).contains(&predict_score([0.0, 800.0])));
        assert!((0.0..=1.0).contains(&predict_score([800.0, 0.0])));
    }

    #[test]
    fn cross_entropy_gradient() {
        let logits = array![[0.3, -1.2], [2.0, 0.5]];
        let labels = [1, 0];
        let (loss, grad) = cross_entropy(&logits, &labels);
        let h = 1e-6;
        for b in 0..2 {
            for c in 0..2 {
                let mut p = logits.clone();
                p[[b, c]] += h;
                let mut m = logits.clone();
                m[[b, c]] -= h;
                let fd = (cross_entropy(&p, &labels).0 - cross_entropy(&m, &labels).0) / (2.0 * h);
                assert_relative_eq!(grad[[b, c]], fd, epsilon = 1e-8);
            }
        }
        assert!(loss > 0.0);
    }

    #[test]
    fn cam_examples() {
        let f = array![[1.0, 2.0, 3.0, 4.0]];
        let m = cam_from_features(f.view(), &[2.0], 2, POSITIVE);
        assert_eq!(m.values, array![[2.0, 4.0], [6.0, 8.0]]);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = EffNet::new(tiny(), &mut rng);
        net.fc_weight.value.fill(0.0);
        let img = random_image(4, &mut rng);
        let m = net.cam(&img, &ALL, POSITIVE).unwrap();
        assert!(m.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cam_mean_equals_logit_minus_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut net = EffNet::new(tiny(), &mut rng);
        net.fc_bias.value = vec![0.3, -0.7];
        let img = random_image(5, &mut rng);
        let logits = net.forward_image(&img, &ALL).unwrap();
        for class in [NEGATIVE, POSITIVE] {
            let m = net.cam(&img, &ALL, class).unwrap();
            assert_relative_eq!(m.mean(), logits[class] - net.fc_bias.value[class], max_relative = 1e-9);
        }
    }

    #[test]
    fn importance_examples() {
        let m = CamMap {
            values: array![[1.0, 0.0], [2.0, 3.0]],
            class: POSITIVE,
        };
        assert_eq!(link_importance(&m, 0), vec![Some(3.0), Some(5.0)]);
        assert_eq!(link_importance(&m, 1), vec![None, Some(5.0)]);
        let z = CamMap {
            values: Array2::zeros((3, 3)),
            class: POSITIVE,
        };
        assert_eq!(link_importance(&z, 0), vec![Some(0.0); 3]);
    }
}
