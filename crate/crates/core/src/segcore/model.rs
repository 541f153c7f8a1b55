//! U-Net-style encoder-decoder with named feature taps.
//!
//! The model is a plain struct of conv blocks; forward passes return an
//! explicit cache, and the backward pass accepts gradient seeds at the
//! output probabilities and/or at any cached tap, accumulating everything
//! through shared paths (skip connections included) down to the input.

use ndarray::{Array1, Array2, Array3, NdFloat};
use sha2::{Digest, Sha256};

use super::SegError;
use crate::nn::{
    concat_channels, maxpool2, maxpool2_backward, relu, relu_backward, softmax_channels,
    softmax_channels_backward, split_channels, upsample2, upsample2_backward, Conv, ConvGrad,
};
use crate::rng::stream;

/// Architecture hyperparameters. `width` is the channel count of the first
/// encoder stage; it doubles at every downsampling.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub n_classes: usize,
    pub stages: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            in_channels: 3,
            n_classes: super::N_CLASSES,
            stages: 4,
            width: 16,
            seed: 0,
        }
    }
}

/// A named point in the network where activations can be observed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TapPoint {
    /// Output of encoder stage `s` (1-based, before pooling).
    Enc(usize),
    Bottleneck,
    /// Output of decoder stage `s` (1-based; `Dec(1)` feeds the head).
    Dec(usize),
}

impl TapPoint {
    pub fn name(&self) -> String {
        match self {
            TapPoint::Enc(s) => format!("enc_{s}"),
            TapPoint::Bottleneck => "bottleneck".into(),
            TapPoint::Dec(s) => format!("dec_{s}"),
        }
    }

    pub fn parse(name: &str) -> Result<TapPoint, SegError> {
        if name == "bottleneck" {
            return Ok(TapPoint::Bottleneck);
        }
        let parse_stage = |rest: &str| rest.parse::<usize>().ok().filter(|&s| s >= 1);
        if let Some(rest) = name.strip_prefix("enc_") {
            if let Some(s) = parse_stage(rest) {
                return Ok(TapPoint::Enc(s));
            }
        }
        if let Some(rest) = name.strip_prefix("dec_") {
            if let Some(s) = parse_stage(rest) {
                return Ok(TapPoint::Dec(s));
            }
        }
        Err(SegError::UnknownTap(name.to_string()))
    }

    /// Distance from the input, counted in blocks along the forward path.
    pub fn depth(&self, stages: usize) -> usize {
        match self {
            TapPoint::Enc(s) => *s,
            TapPoint::Bottleneck => stages + 1,
            TapPoint::Dec(s) => 2 * stages + 2 - s,
        }
    }
}

// Taps serialize as their `name()` string ("enc_2", "bottleneck", "dec_1")
// so config files stay hand-editable.
impl serde::Serialize for TapPoint {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> serde::Deserialize<'de> for TapPoint {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        TapPoint::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Static description of one tap of a concrete model.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TapInfo {
    pub name: String,
    pub depth: usize,
    pub channels: usize,
}

/// Two 3x3 convolutions, each followed by ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock<F> {
    pub c1: Conv<F>,
    pub c2: Conv<F>,
}

/// Per-block forward cache. `cols` are kept only when parameter gradients
/// will be needed (training); input-space attacks run without them.
pub struct BlockCache<F> {
    pub y1: Array3<F>,
    pub y2: Array3<F>,
    cols: Option<(Array2<F>, Array2<F>)>,
}

impl<F: NdFloat> ConvBlock<F> {
    fn init(cin: usize, cout: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        ConvBlock {
            c1: Conv::init(cin, cout, 3, rng),
            c2: Conv::init(cout, cout, 3, rng),
        }
    }

    fn forward_cached(&self, x: &Array3<F>, keep_cols: bool) -> BlockCache<F> {
        let (z1, cols1) = self.c1.forward_cached(x);
        let y1 = relu(&z1);
        let (z2, cols2) = self.c2.forward_cached(&y1);
        let y2 = relu(&z2);
        BlockCache {
            y1,
            y2,
            cols: if keep_cols { Some((cols1, cols2)) } else { None },
        }
    }

    fn forward(&self, x: &Array3<F>) -> Array3<F> {
        relu(&self.c2.forward(&relu(&self.c1.forward(x))))
    }

    /// Backward through conv-relu-conv-relu. When `grads` is `Some`, the
    /// cache must have been built with `keep_cols = true`.
    fn backward(
        &self,
        cache: &BlockCache<F>,
        dy2: &Array3<F>,
        grads: Option<(&mut ConvGrad<F>, &mut ConvGrad<F>)>,
    ) -> Array3<F> {
        let dz2 = relu_backward(&cache.y2, dy2);
        match grads {
            Some((g1, g2)) => {
                let (cols1, cols2) = cache.cols.as_ref().expect("param grads need cached cols");
                let dy1 = self.c2.backward(cols2, &dz2, g2);
                let dz1 = relu_backward(&cache.y1, &dy1);
                self.c1.backward(cols1, &dz1, g1)
            }
            None => {
                let dy1 = self.c2.backward_input(&dz2);
                let dz1 = relu_backward(&cache.y1, &dy1);
                self.c1.backward_input(&dz1)
            }
        }
    }
}

/// Encoder-decoder segmentation network.
#[derive(Debug, Clone)]
pub struct SegModel<F> {
    pub cfg: ArchConfig,
    pub enc: Vec<ConvBlock<F>>,
    pub bottleneck: ConvBlock<F>,
    pub dec: Vec<ConvBlock<F>>,
    pub head: Conv<F>,
}

/// Parameter gradients in canonical visit order (see [`SegModel::visit`]).
pub struct ModelGrads<F> {
    pub convs: Vec<ConvGrad<F>>,
}

/// Gradient seeds for [`SegModel::backward`]. Any subset may be present;
/// contributions through shared paths accumulate.
#[derive(Default)]
pub struct GradSeeds<F> {
    pub d_probs: Option<Array3<F>>,
    pub d_taps: Vec<(TapPoint, Array3<F>)>,
}

/// Everything the backward pass needs, captured during forward.
pub struct ForwardCache<F> {
    input_dim: (usize, usize, usize),
    enc: Vec<BlockCache<F>>,
    pool_idx: Vec<Array3<u8>>,
    bottleneck: Option<BlockCache<F>>,
    /// `dec[k]` is decoder stage `k+1`; entries deeper than the requested
    /// stop point are absent.
    dec: Vec<Option<BlockCache<F>>>,
    /// Softmax output, present only when the forward pass reached the head.
    pub probs: Option<Array3<F>>,
}

impl<F: NdFloat> ForwardCache<F> {
    /// Activation tensor at `tap`, if that part of the network ran.
    pub fn tap_value(&self, tap: TapPoint) -> Option<&Array3<F>> {
        match tap {
            TapPoint::Enc(s) => self.enc.get(s - 1).map(|b| &b.y2),
            TapPoint::Bottleneck => self.bottleneck.as_ref().map(|b| &b.y2),
            TapPoint::Dec(s) => self.dec.get(s - 1).and_then(|b| b.as_ref()).map(|b| &b.y2),
        }
    }
}

impl<F: NdFloat> SegModel<F> {
    pub fn init(cfg: ArchConfig) -> Self {
        let mut rng = stream(cfg.seed, "model-init");
        let l = cfg.stages;
        assert!(l >= 2, "need at least two encoder stages");
        let mut enc = Vec::with_capacity(l);
        let mut cin = cfg.in_channels;
        for k in 0..l {
            let cout = cfg.width << k;
            enc.push(ConvBlock::init(cin, cout, &mut rng));
            cin = cout;
        }
        let bottleneck = ConvBlock::init(cfg.width << (l - 1), cfg.width << l, &mut rng);
        let mut dec = Vec::with_capacity(l);
        for k in 0..l {
            let cout = cfg.width << k;
            dec.push(ConvBlock::init(3 * cout, cout, &mut rng));
        }
        let head = Conv::init(cfg.width, cfg.n_classes, 1, &mut rng);
        SegModel {
            cfg,
            enc,
            bottleneck,
            dec,
            head,
        }
    }

    /// All observable taps with their depth and channel count.
    pub fn taps(&self) -> Vec<TapInfo> {
        let l = self.cfg.stages;
        let mut out = Vec::new();
        for s in 1..=l {
            out.push(TapInfo {
                name: TapPoint::Enc(s).name(),
                depth: TapPoint::Enc(s).depth(l),
                channels: self.cfg.width << (s - 1),
            });
        }
        out.push(TapInfo {
            name: TapPoint::Bottleneck.name(),
            depth: TapPoint::Bottleneck.depth(l),
            channels: self.cfg.width << l,
        });
        for s in (1..=l).rev() {
            out.push(TapInfo {
                name: TapPoint::Dec(s).name(),
                depth: TapPoint::Dec(s).depth(l),
                channels: self.cfg.width << (s - 1),
            });
        }
        out
    }

    /// Validate that `tap` exists for this architecture.
    pub fn check_tap(&self, tap: TapPoint) -> Result<(), SegError> {
        let ok = match tap {
            TapPoint::Enc(s) | TapPoint::Dec(s) => s >= 1 && s <= self.cfg.stages,
            TapPoint::Bottleneck => true,
        };
        if ok {
            Ok(())
        } else {
            Err(SegError::UnknownTap(tap.name()))
        }
    }

    fn check_input(&self, x: &Array3<F>) -> Result<(), SegError> {
        let (c, h, w) = x.dim();
        if c != self.cfg.in_channels {
            return Err(SegError::BadChannels {
                got: c,
                want: self.cfg.in_channels,
            });
        }
        let div = 1usize << self.cfg.stages;
        if h % div != 0 || w % div != 0 || h == 0 || w == 0 {
            return Err(SegError::BadShape {
                h,
                w,
                div,
                stages: self.cfg.stages,
            });
        }
        Ok(())
    }

    /// Forward pass with cache. `upto = None` runs the whole network
    /// (including the softmax head); `Some(tap)` stops as soon as the tap's
    /// activation is available, skipping unneeded stages. `keep_cols` must
    /// be true when parameter gradients will be requested later.
    pub fn forward_cached(
        &self,
        x: &Array3<F>,
        upto: Option<TapPoint>,
        keep_cols: bool,
    ) -> Result<ForwardCache<F>, SegError> {
        self.check_input(x)?;
        if let Some(t) = upto {
            self.check_tap(t)?;
        }
        let l = self.cfg.stages;
        let mut cache = ForwardCache {
            input_dim: x.dim(),
            enc: Vec::with_capacity(l),
            pool_idx: Vec::with_capacity(l),
            bottleneck: None,
            dec: (0..l).map(|_| None).collect(),
            probs: None,
        };

        // encoder
        let mut cur = x.clone();
        for k in 0..l {
            let bc = self.enc[k].forward_cached(&cur, keep_cols);
            if upto == Some(TapPoint::Enc(k + 1)) {
                cache.enc.push(bc);
                return Ok(cache);
            }
            let (pooled, idx) = maxpool2(&bc.y2);
            cache.enc.push(bc);
            cache.pool_idx.push(idx);
            cur = pooled;
        }

        // bottleneck
        let bc = self.bottleneck.forward_cached(&cur, keep_cols);
        cur = bc.y2.clone();
        cache.bottleneck = Some(bc);
        if upto == Some(TapPoint::Bottleneck) {
            return Ok(cache);
        }

        // decoder, deep to shallow
        let stop_dec = match upto {
            Some(TapPoint::Dec(s)) => s,
            _ => 1,
        };
        for k in (0..l).rev() {
            let up = upsample2(&cur);
            let cat = concat_channels(&up, &cache.enc[k].y2);
            let bc = self.dec[k].forward_cached(&cat, keep_cols);
            cur = bc.y2.clone();
            cache.dec[k] = Some(bc);
            if k + 1 == stop_dec && upto.is_some() {
                return Ok(cache);
            }
        }

        let logits = self.head.forward(&cur);
        cache.probs = Some(softmax_channels(&logits));
        Ok(cache)
    }

    /// Inference without any caching: per-pixel class probabilities
    /// `(n_classes, h, w)`.
    pub fn predict_probs(&self, x: &Array3<F>) -> Result<Array3<F>, SegError> {
        self.check_input(x)?;
        let l = self.cfg.stages;
        let mut skips = Vec::with_capacity(l);
        let mut cur = x.clone();
        for k in 0..l {
            let y = self.enc[k].forward(&cur);
            let (pooled, _) = maxpool2(&y);
            skips.push(y);
            cur = pooled;
        }
        cur = self.bottleneck.forward(&cur);
        for k in (0..l).rev() {
            let cat = concat_channels(&upsample2(&cur), &skips[k]);
            cur = self.dec[k].forward(&cat);
        }
        Ok(softmax_channels(&self.head.forward(&cur)))
    }

    /// Hard segmentation: per-pixel argmax over classes. Ties resolve to the
    /// lowest class id.
    pub fn predict_mask(&self, x: &Array3<F>) -> Result<Array2<u8>, SegError> {
        Ok(argmax_mask(&self.predict_probs(x)?))
    }

    /// Backward pass from gradient seeds to the input gradient. Parameter
    /// gradients are accumulated into `param_grads` when provided (the cache
    /// must then have been built with `keep_cols = true`).
    pub fn backward(
        &self,
        cache: &ForwardCache<F>,
        seeds: &GradSeeds<F>,
        mut param_grads: Option<&mut ModelGrads<F>>,
    ) -> Result<Array3<F>, SegError> {
        let l = self.cfg.stages;
        for (tap, d) in &seeds.d_taps {
            self.check_tap(*tap)?;
            let val = cache.tap_value(*tap).ok_or(SegError::TapNotCached {
                name: tap.name(),
            })?;
            if d.dim() != val.dim() {
                return Err(SegError::SeedShape {
                    name: tap.name(),
                    got: d.shape().to_vec(),
                    want: val.shape().to_vec(),
                });
            }
        }

        let seed_for = |tap: TapPoint| -> Option<Array3<F>> {
            let mut acc: Option<Array3<F>> = None;
            for (t, d) in &seeds.d_taps {
                if *t == tap {
                    match &mut acc {
                        Some(a) => *a += d,
                        None => acc = Some(d.clone()),
                    }
                }
            }
            acc
        };
        fn add_into<F: NdFloat>(acc: &mut Option<Array3<F>>, v: Array3<F>) {
            match acc {
                Some(a) => *a += &v,
                None => *acc = Some(v),
            }
        }

        // gradient flowing into each decoder stage's output
        let mut d_dec: Vec<Option<Array3<F>>> = (0..l).map(|_| None).collect();
        let mut d_skip: Vec<Option<Array3<F>>> = (0..l).map(|_| None).collect();
        let mut d_bott: Option<Array3<F>> = None;

        if let Some(dp) = &seeds.d_probs {
            let probs = cache.probs.as_ref().ok_or(SegError::TapNotCached {
                name: "probs".into(),
            })?;
            if dp.dim() != probs.dim() {
                return Err(SegError::SeedShape {
                    name: "probs".into(),
                    got: dp.shape().to_vec(),
                    want: probs.shape().to_vec(),
                });
            }
            let d_logits = softmax_channels_backward(probs, dp);
            let dec1 = cache.dec[0].as_ref().expect("probs imply full decoder");
            let d_head_in = match param_grads.as_deref_mut() {
                Some(g) => {
                    let (_, h, w) = dec1.y2.dim();
                    let cols = dec1.y2.to_shape((self.cfg.width, h * w)).unwrap().to_owned();
                    self.head.backward(&cols, &d_logits, g.convs.last_mut().unwrap())
                }
                None => self.head.backward_input(&d_logits),
            };
            add_into(&mut d_dec[0], d_head_in);
        }

        // decoder stages shallow -> deep
        for k in 0..l {
            if let Some(s) = seed_for(TapPoint::Dec(k + 1)) {
                add_into(&mut d_dec[k], s);
            }
            let Some(dy) = d_dec[k].take() else { continue };
            let bc = cache.dec[k].as_ref().ok_or(SegError::TapNotCached {
                name: TapPoint::Dec(k + 1).name(),
            })?;
            let g = param_grads.as_deref_mut().map(|mg| {
                let (a, b) = mg.dec_pair_mut(l, k);
                (a, b)
            });
            let d_cat = self.dec[k].backward(bc, &dy, g);
            let c_up = self.cfg.width << (k + 1);
            let (d_up, d_sk) = split_channels(&d_cat, c_up);
            add_into(&mut d_skip[k], d_sk);
            let d_deeper = upsample2_backward(&d_up);
            if k + 1 < l {
                add_into(&mut d_dec[k + 1], d_deeper);
            } else {
                add_into(&mut d_bott, d_deeper);
            }
        }

        if let Some(s) = seed_for(TapPoint::Bottleneck) {
            add_into(&mut d_bott, s);
        }

        // bottleneck, then encoder deep -> shallow
        let mut d_pool_out: Option<Array3<F>> = None; // grad at pooled activation
        if let Some(db) = d_bott {
            let bc = cache.bottleneck.as_ref().ok_or(SegError::TapNotCached {
                name: TapPoint::Bottleneck.name(),
            })?;
            let g = param_grads
                .as_deref_mut()
                .map(|mg| mg.bott_pair_mut(l));
            d_pool_out = Some(self.bottleneck.backward(bc, &db, g));
        }

        let mut d_below: Option<Array3<F>> = None;
        for k in (0..l).rev() {
            let mut d_enc_out: Option<Array3<F>> = d_below.take();
            if let Some(dp) = d_pool_out.take() {
                // this is the gradient at pool(enc_k) for the deepest stage
                let y_dim = cache.enc[k].y2.dim();
                add_into(
                    &mut d_enc_out,
                    maxpool2_backward(&cache.pool_idx[k], &dp, y_dim),
                );
            }
            if let Some(ds) = d_skip[k].take() {
                add_into(&mut d_enc_out, ds);
            }
            if let Some(s) = seed_for(TapPoint::Enc(k + 1)) {
                add_into(&mut d_enc_out, s);
            }
            let Some(dy) = d_enc_out else { continue };
            let g = param_grads.as_deref_mut().map(|mg| mg.enc_pair_mut(k));
            let dx = self.enc[k].backward(&cache.enc[k], &dy, g);
            if k > 0 {
                // dx is the gradient at pool(enc_{k-1}); route through the pool
                let y_dim = cache.enc[k - 1].y2.dim();
                add_into(
                    &mut d_below,
                    maxpool2_backward(&cache.pool_idx[k - 1], &dx, y_dim),
                );
            } else {
                d_below = Some(dx);
            }
        }

        Ok(d_below.unwrap_or_else(|| Array3::zeros(cache.input_dim)))
    }

    /// Canonical `(name, conv)` enumeration; parameter flattening, gradient
    /// layout, checkpoints and checksums all share this order.
    pub fn visit(&self) -> Vec<(String, &Conv<F>)> {
        let mut v = Vec::new();
        for (i, b) in self.enc.iter().enumerate() {
            v.push((format!("enc_{}.conv1", i + 1), &b.c1));
            v.push((format!("enc_{}.conv2", i + 1), &b.c2));
        }
        v.push(("bottleneck.conv1".into(), &self.bottleneck.c1));
        v.push(("bottleneck.conv2".into(), &self.bottleneck.c2));
        for (i, b) in self.dec.iter().enumerate() {
            v.push((format!("dec_{}.conv1", i + 1), &b.c1));
            v.push((format!("dec_{}.conv2", i + 1), &b.c2));
        }
        v.push(("head".into(), &self.head));
        v
    }

    fn visit_mut(&mut self) -> Vec<&mut Conv<F>> {
        let mut v = Vec::new();
        for b in self.enc.iter_mut() {
            v.push(&mut b.c1);
            v.push(&mut b.c2);
        }
        v.push(&mut self.bottleneck.c1);
        v.push(&mut self.bottleneck.c2);
        for b in self.dec.iter_mut() {
            v.push(&mut b.c1);
            v.push(&mut b.c2);
        }
        v.push(&mut self.head);
        v
    }

    pub fn n_params(&self) -> usize {
        self.visit().iter().map(|(_, c)| c.n_params()).sum()
    }

    /// Parameters as one flat vector (visit order, weights then bias per conv).
    pub fn flat_params(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.n_params());
        for (_, c) in self.visit() {
            out.extend(c.w.iter().cloned());
            out.extend(c.b.iter().cloned());
        }
        out
    }

    pub fn load_flat(&mut self, flat: &[F]) {
        let mut off = 0;
        for c in self.visit_mut() {
            for v in c.w.iter_mut() {
                *v = flat[off];
                off += 1;
            }
            for v in c.b.iter_mut() {
                *v = flat[off];
                off += 1;
            }
        }
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }

    pub fn zero_grads(&self) -> ModelGrads<F> {
        ModelGrads {
            convs: self.visit().iter().map(|(_, c)| c.zero_grad()).collect(),
        }
    }
}

impl SegModel<f32> {
    /// SHA-256 over the little-endian parameter bytes in visit order.
    /// Used to pin a frozen backbone.
    pub fn weights_checksum(&self) -> String {
        let mut h = Sha256::new();
        for (_, c) in self.visit() {
            for v in c.w.iter() {
                h.update(v.to_le_bytes());
            }
            for v in c.b.iter() {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }
}

impl<F: NdFloat> ModelGrads<F> {
    // index helpers mirroring the visit order above
    fn enc_pair_mut(&mut self, k: usize) -> (&mut ConvGrad<F>, &mut ConvGrad<F>) {
        let (a, b) = self.convs.split_at_mut(2 * k + 1);
        (&mut a[2 * k], &mut b[0])
    }
    fn bott_pair_mut(&mut self, l: usize) -> (&mut ConvGrad<F>, &mut ConvGrad<F>) {
        let base = 2 * l;
        let (a, b) = self.convs.split_at_mut(base + 1);
        (&mut a[base], &mut b[0])
    }
    fn dec_pair_mut(&mut self, l: usize, k: usize) -> (&mut ConvGrad<F>, &mut ConvGrad<F>) {
        let base = 2 * l + 2 + 2 * k;
        let (a, b) = self.convs.split_at_mut(base + 1);
        (&mut a[base], &mut b[0])
    }

    /// Flatten in the same order as [`SegModel::flat_params`].
    pub fn flat(&self) -> Vec<F> {
        let mut out = Vec::new();
        for g in &self.convs {
            out.extend(g.w.iter().cloned());
            out.extend(g.b.iter().cloned());
        }
        out
    }

    pub fn scale(&mut self, s: F) {
        for g in &mut self.convs {
            g.w.mapv_inplace(|v| v * s);
            g.b.mapv_inplace(|v| v * s);
        }
    }
}

/// Per-pixel argmax over the class axis; ties go to the lowest class id.
pub fn argmax_mask<F: NdFloat>(probs: &Array3<F>) -> Array2<u8> {
    let (k, h, w) = probs.dim();
    let mut m = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut best = probs[[0, y, x]];
            let mut bi = 0u8;
            for c in 1..k {
                if probs[[c, y, x]] > best {
                    best = probs[[c, y, x]];
                    bi = c as u8;
                }
            }
            m[[y, x]] = bi;
        }
    }
    m
}

/// Channel-wise spatial mean of a tap activation: the probe's input space.
pub fn pool_spatial<F: NdFloat>(t: &Array3<F>) -> Array1<F> {
    let (c, h, w) = t.dim();
    let n = F::from(h * w).unwrap();
    Array1::from_iter((0..c).map(|ci| {
        let mut s = F::zero();
        for y in 0..h {
            for x in 0..w {
                s = s + t[[ci, y, x]];
            }
        }
        s / n
    }))
}
