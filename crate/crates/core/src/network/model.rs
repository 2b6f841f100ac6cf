//! The multi-task Deep U-Net: forward pass with cached activations and the
//! matching reverse-mode backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::*;
use super::params::{LayerIds, Layout, NetworkConfig, PairIds, ParameterSet, UnitIds, DEPTH};
use super::tensor::{Feat, Scalar};
use crate::error::{Error, Result};
use crate::preprocess::SIZE_MULTIPLE;

/// Batch-norm running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics and dropout drawn from `dropout_seed`.
    Train { dropout_seed: u64 },
    /// Running statistics, no dropout.
    Eval,
}

impl Mode {
    fn is_train(self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// `[n_classes][batch][h][w]`.
    pub seg_logits: Feat<T>,
    /// One logit per slice; sigmoid gives P(post-ablation).
    pub class_logits: Vec<T>,
}

impl<T: Scalar> ForwardOutput<T> {
    /// Softmax probability of class 1 (atrium) for slice `n`, row-major.
    pub fn foreground_probability(&self, n: usize) -> Vec<T> {
        let s = &self.seg_logits;
        let hw = s.h * s.w;
        let mut out = Vec::with_capacity(hw);
        for i in 0..hw {
            let at = |c: usize| s.data[(c * s.n + n) * hw + i];
            let max = (0..s.c).map(at).fold(T::neg_infinity(), T::max);
            let denom: T = (0..s.c).map(|c| (at(c) - max).exp()).sum();
            out.push((at(1) - max).exp() / denom);
        }
        out
    }
}

struct PairCache<T> {
    input: Feat<T>,
    bn1: BnCache<T>,
    mid: Feat<T>,
    bn2: BnCache<T>,
    out: Feat<T>,
}

struct ClassifierCache<T> {
    tap_shape: (usize, usize, usize, usize),
    spp: Vec<T>,
    spp_arg: Vec<usize>,
    hidden: Vec<T>,
    drop_mask: Option<Vec<T>>,
    dropped: Vec<T>,
}

/// Activations kept for the backward pass.
pub struct Cache<T> {
    enc: Vec<(PairCache<T>, Vec<u8>)>,
    bottleneck: PairCache<T>,
    dec: Vec<PairCache<T>>,
    cls: ClassifierCache<T>,
    batch: usize,
}

/// Gradient buffers aligned with `ParameterSet::tensors` (zeros for buffers).
pub type Gradients<T> = Vec<Vec<T>>;

/// Architecture bound to a configuration.
#[derive(Debug, Clone)]
pub struct UNet {
    pub config: NetworkConfig,
    pub layout: Layout,
}

impl UNet {
    pub fn new(config: &NetworkConfig) -> Result<Self> {
        Ok(UNet {
            config: config.clone(),
            layout: Layout::new(config)?,
        })
    }

    /// Confirms that `params` was built for this architecture.
    pub fn check<T: Scalar>(&self, params: &ParameterSet<T>) -> Result<()> {
        if params.config != self.config {
            return Err(Error::Checkpoint(
                "parameter set was built for a different network config".into(),
            ));
        }
        if params.tensors.len() != self.layout.specs.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.layout.specs.len(),
                params.tensors.len()
            )));
        }
        for (t, s) in params.tensors.iter().zip(&self.layout.specs) {
            if t.name != s.name || t.shape != s.shape || t.data.len() != t.numel() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` {:?} does not match expected `{}` {:?}",
                    t.name, t.shape, s.name, s.shape
                )));
            }
        }
        Ok(())
    }

    fn check_input<T: Scalar>(&self, x: &Feat<T>) -> Result<()> {
        if x.c != 1 || x.n == 0 {
            return Err(Error::Shape(format!(
                "input must be a non-empty single-channel batch, got c={} n={}",
                x.c, x.n
            )));
        }
        if x.h == 0 || x.w == 0 || x.h % SIZE_MULTIPLE != 0 || x.w % SIZE_MULTIPLE != 0 {
            return Err(Error::Shape(format!(
                "input {}x{} is not divisible by {SIZE_MULTIPLE}; pad it with pad_to_multiple_of_32 first",
                x.h, x.w
            )));
        }
        let (th, tw) = (x.h >> 4, x.w >> 4);
        if let Some(&l) = self.config.spp_levels.iter().find(|&&l| l > th.min(tw)) {
            return Err(Error::Shape(format!(
                "pyramid level {l} exceeds the {th}x{tw} classification feature map of a {}x{} input",
                x.h, x.w
            )));
        }
        Ok(())
    }

    /// Runs the network. The returned cache feeds [`UNet::backward`]; in
    /// eval mode it is still produced but usually dropped.
    pub fn forward<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        input: &Feat<T>,
        mode: Mode,
    ) -> Result<(ForwardOutput<T>, Cache<T>)> {
        self.check_input(input)?;
        let p = &params.tensors;
        let train = mode.is_train();
        let l = &self.layout;

        let mut enc = Vec::with_capacity(DEPTH);
        let mut x = input.clone();
        for ids in &l.enc {
            let (f, pc) = pair_forward(params, ids, x, train);
            let (pooled, arg) = maxpool2_forward(&f);
            enc.push((pc, arg));
            x = pooled;
        }
        // x is the 5th pooled map; the classification tap is the 4th
        let cls = {
            let tap = &enc[DEPTH - 1].0.input;
            self.classifier_forward(params, tap, mode)?
        };
        let (mut y, bottleneck) = pair_forward(params, &l.bottleneck, x, train);

        let mut dec = Vec::with_capacity(DEPTH);
        for (i, (up, ids)) in l.up.iter().zip(&l.dec).enumerate() {
            let u = upconv2x2_forward(&y, &p[up.weight].data, &p[up.bias].data, up.c_out);
            let skip = &enc[DEPTH - 1 - i].0.out;
            let cat = Feat::concat(skip, &u);
            let (out, pc) = pair_forward(params, ids, cat, train);
            dec.push(pc);
            y = out;
        }
        let seg = conv1x1_forward(&y, &p[l.head.weight].data, &p[l.head.bias].data, l.head.c_out);
        let class_logits = linear_forward(
            &cls.dropped,
            input.n,
            &p[l.fc2.weight].data,
            &p[l.fc2.bias].data,
            1,
        );
        Ok((
            ForwardOutput {
                seg_logits: seg,
                class_logits,
            },
            Cache {
                enc,
                bottleneck,
                dec,
                cls,
                batch: input.n,
            },
        ))
    }

    /// Eval-mode forward without keeping activations.
    pub fn predict<T: Scalar>(&self, params: &ParameterSet<T>, input: &Feat<T>) -> Result<ForwardOutput<T>> {
        Ok(self.forward(params, input, Mode::Eval)?.0)
    }

    fn classifier_forward<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        tap: &Feat<T>,
        mode: Mode,
    ) -> Result<ClassifierCache<T>> {
        let p = &params.tensors;
        let l = &self.layout;
        let (spp, spp_arg) = spp_forward(tap, &self.config.spp_levels)?;
        let mut hidden = linear_forward(&spp, tap.n, &p[l.fc1.weight].data, &p[l.fc1.bias].data, l.fc1.c_out);
        relu_in_place(&mut hidden);
        let drop_mask = match mode {
            Mode::Train { dropout_seed } if self.config.dropout_p > 0.0 => {
                let keep = 1.0 - self.config.dropout_p;
                let scale = T::of(1.0 / keep);
                let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
                Some(
                    (0..hidden.len())
                        .map(|_| {
                            if rng.gen::<f64>() < keep {
                                scale
                            } else {
                                T::zero()
                            }
                        })
                        .collect::<Vec<T>>(),
                )
            }
            _ => None,
        };
        let dropped = match &drop_mask {
            Some(m) => hidden.iter().zip(m).map(|(&h, &k)| h * k).collect(),
            None => hidden.clone(),
        };
        Ok(ClassifierCache {
            tap_shape: (tap.c, tap.n, tap.h, tap.w),
            spp,
            spp_arg,
            hidden,
            drop_mask,
            dropped,
        })
    }

    /// Reverse pass from logit gradients to parameter gradients.
    pub fn backward<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        cache: &Cache<T>,
        d_seg: &Feat<T>,
        d_class: &[T],
    ) -> Gradients<T> {
        let p = &params.tensors;
        let l = &self.layout;
        let mut g = params.zeros_like();
        let n = cache.batch;

        // classification branch
        let cls = &cache.cls;
        let (d_dropped, dw2, db2) =
            linear_backward(&cls.dropped, n, &p[l.fc2.weight].data, d_class, 1);
        g[l.fc2.weight] = dw2;
        g[l.fc2.bias] = db2;
        let mut d_hidden = match &cls.drop_mask {
            Some(m) => d_dropped.iter().zip(m).map(|(&d, &k)| d * k).collect(),
            None => d_dropped,
        };
        relu_backward_in_place(&cls.hidden, &mut d_hidden);
        let (d_spp, dw1, db1) =
            linear_backward(&cls.spp, n, &p[l.fc1.weight].data, &d_hidden, l.fc1.c_out);
        g[l.fc1.weight] = dw1;
        g[l.fc1.bias] = db1;
        let (tc, tn, th, tw) = cls.tap_shape;
        let d_tap = spp_backward(&d_spp, &cls.spp_arg, &Feat::zeros(tc, tn, th, tw));

        // segmentation head and decoder
        let last = &cache.dec[DEPTH - 1].out;
        let (mut dy, dwh, dbh) = conv1x1_backward(last, &p[l.head.weight].data, d_seg);
        g[l.head.weight] = dwh;
        g[l.head.bias] = dbh;
        let mut d_skips: Vec<Option<Feat<T>>> = (0..DEPTH).map(|_| None).collect();
        for i in (0..DEPTH).rev() {
            let d_cat = pair_backward(params, &l.dec[i], &cache.dec[i], dy, true, &mut g)
                .expect("decoder input gradient");
            let c_skip = l.up[i].c_out;
            let (d_skip, d_up) = d_cat.split(c_skip);
            d_skips[DEPTH - 1 - i] = Some(d_skip);
            let up_in = if i == 0 {
                &cache.bottleneck.out
            } else {
                &cache.dec[i - 1].out
            };
            let (d_prev, dwu, dbu) = upconv2x2_backward(up_in, &p[l.up[i].weight].data, &d_up);
            g[l.up[i].weight] = dwu;
            g[l.up[i].bias] = dbu;
            dy = d_prev;
        }

        // bottleneck, then encoder from level 5 down
        let mut d_pooled = pair_backward(params, &l.bottleneck, &cache.bottleneck, dy, true, &mut g)
            .expect("bottleneck input gradient");
        for k in (0..DEPTH).rev() {
            let (pc, arg) = &cache.enc[k];
            let mut d_f = maxpool2_backward(&d_pooled, arg, pc.out.h, pc.out.w);
            if let Some(ds) = d_skips[k].take() {
                add_assign(&mut d_f.data, &ds.data);
            }
            let d_in = pair_backward(params, &l.enc[k], pc, d_f, k > 0, &mut g);
            if k > 0 {
                let mut d = d_in.expect("encoder input gradient");
                if k == DEPTH - 1 {
                    // the 4th pooled map also feeds the classifier
                    add_assign(&mut d.data, &d_tap.data);
                }
                d_pooled = d;
            }
        }
        g
    }

    /// Blends the batch statistics recorded in `cache` into the running statistics.
    pub fn update_running_stats<T: Scalar>(&self, params: &mut ParameterSet<T>, cache: &Cache<T>) {
        let l = &self.layout;
        let mut pairs: Vec<(&PairIds, &PairCache<T>)> = Vec::with_capacity(2 * DEPTH + 1);
        for (ids, (pc, _)) in l.enc.iter().zip(&cache.enc) {
            pairs.push((ids, pc));
        }
        pairs.push((&l.bottleneck, &cache.bottleneck));
        for (ids, pc) in l.dec.iter().zip(&cache.dec) {
            pairs.push((ids, pc));
        }
        let m = T::of(BN_MOMENTUM);
        for (ids, pc) in pairs {
            for (u, bn) in [(&ids.first, &pc.bn1), (&ids.second, &pc.bn2)] {
                if !bn.train {
                    continue;
                }
                let count = bn.xhat.plane();
                let unbias = if count > 1 {
                    T::of(count as f64 / (count - 1) as f64)
                } else {
                    T::one()
                };
                for c in 0..u.c_out {
                    let rm = &mut params.tensors[u.mean].data[c];
                    *rm = (T::one() - m) * *rm + m * bn.batch_mean[c];
                    let rv = &mut params.tensors[u.var].data[c];
                    *rv = (T::one() - m) * *rv + m * bn.batch_var[c] * unbias;
                }
            }
        }
    }

    /// Parameter ids of the classification branch only.
    pub fn classifier_ids(&self) -> [usize; 4] {
        self.layout.classifier_ids()
    }

    pub fn head(&self) -> LayerIds {
        self.layout.head
    }
}

fn add_assign<T: Scalar>(a: &mut [T], b: &[T]) {
    for (x, &y) in a.iter_mut().zip(b) {
        *x = *x + y;
    }
}

fn unit_forward<T: Scalar>(
    params: &ParameterSet<T>,
    u: &UnitIds,
    x: &Feat<T>,
    train: bool,
) -> (Feat<T>, BnCache<T>) {
    let p = &params.tensors;
    let z = conv3x3_forward(x, &p[u.weight].data, &p[u.bias].data, u.c_out);
    let stats = (!train).then(|| (p[u.mean].data.as_slice(), p[u.var].data.as_slice()));
    let (mut y, bn) = batchnorm_forward(z, &p[u.gamma].data, &p[u.beta].data, stats);
    relu_in_place(&mut y.data);
    (y, bn)
}

fn pair_forward<T: Scalar>(
    params: &ParameterSet<T>,
    ids: &PairIds,
    input: Feat<T>,
    train: bool,
) -> (Feat<T>, PairCache<T>) {
    let (mid, bn1) = unit_forward(params, &ids.first, &input, train);
    let (out, bn2) = unit_forward(params, &ids.second, &mid, train);
    (
        out.clone(),
        PairCache {
            input,
            bn1,
            mid,
            bn2,
            out,
        },
    )
}

fn unit_backward<T: Scalar>(
    params: &ParameterSet<T>,
    u: &UnitIds,
    input: &Feat<T>,
    bn: &BnCache<T>,
    out: &Feat<T>,
    mut d_out: Feat<T>,
    need_dx: bool,
    g: &mut Gradients<T>,
) -> Option<Feat<T>> {
    let p = &params.tensors;
    relu_backward_in_place(&out.data, &mut d_out.data);
    let (dz, dgamma, dbeta) = batchnorm_backward(bn, &p[u.gamma].data, &d_out);
    g[u.gamma] = dgamma;
    g[u.beta] = dbeta;
    let (dx, dw, db) = conv3x3_backward(input, &p[u.weight].data, &dz, need_dx);
    g[u.weight] = dw;
    g[u.bias] = db;
    dx
}

fn pair_backward<T: Scalar>(
    params: &ParameterSet<T>,
    ids: &PairIds,
    pc: &PairCache<T>,
    d_out: Feat<T>,
    need_dx: bool,
    g: &mut Gradients<T>,
) -> Option<Feat<T>> {
    let d_mid = unit_backward(params, &ids.second, &pc.mid, &pc.bn2, &pc.out, d_out, true, g)
        .expect("mid gradient");
    unit_backward(params, &ids.first, &pc.input, &pc.bn1, &pc.mid, d_mid, need_dx, g)
}

/// Stacks equally sized single-channel images into a network batch.
pub fn stack_batch<T: Scalar>(images: &[&[f32]], h: usize, w: usize) -> Result<Feat<T>> {
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.len() != h * w {
            return Err(Error::Shape(format!(
                "batch image has {} pixels, expected {h}x{w}",
                img.len()
            )));
        }
        data.extend(img.iter().map(|&v| T::of(v as f64)));
    }
    Ok(Feat {
        c: 1,
        n: images.len(),
        h,
        w,
        data,
    })
}
