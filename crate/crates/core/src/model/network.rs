use rand_chacha::ChaCha8Rng;

use super::{Architecture, BnIds, ConvIds, DomainView};
use crate::compute::layers::{
    dense, dense_backward, dropout, dropout_backward, halve_extents, pooled_shortcut, pooled_shortcut_backward,
    relu, relu_backward, zero_invalid,
};
use crate::compute::{
    attention_pool, attention_pool_backward, batch_norm, batch_norm_backward, conv2d, conv2d_accumulate,
    conv2d_backward, AttentionCache, AttentionGrads, AttentionParams, BnCache, BnGrads, BnParams, Mode, ParamId,
    ParamStore, Real, Tensor,
};
use crate::error::{Error, Result};

struct BlockTrace<T> {
    valid_out: Vec<usize>,
    bn1: BnCache<T>,
    h1: Tensor<T>,
    bn2: BnCache<T>,
}

/// Activations kept from a forward pass for the reverse pass.
pub struct Trace<T> {
    input: Tensor<T>,
    valid_in: Vec<usize>,
    stem_bn: BnCache<T>,
    /// `acts[0]` is the stem output, `acts[i + 1]` the output of block `i`.
    acts: Vec<Tensor<T>>,
    valid: Vec<Vec<usize>>,
    blocks: Vec<BlockTrace<T>>,
    final_bn: BnCache<T>,
    features: Tensor<T>,
    attention: AttentionCache<T>,
    pooled: Tensor<T>,
    head_bn: BnCache<T>,
    head_act: Tensor<T>,
    dropout_mask: Vec<T>,
    dropped: Tensor<T>,
}

impl<T: Real> Trace<T> {
    /// Backbone output fed to attention pooling, `[B, F, T', C]`.
    pub fn features(&self) -> &Tensor<T> {
        &self.features
    }

    /// Valid time extent per item after downsampling.
    pub fn feature_frames(&self) -> &[usize] {
        self.valid.last().expect("stem entry")
    }

    /// Attention weights per item over the `F·T'` feature cells.
    pub fn attention_weights(&self) -> &[T] {
        &self.attention.weights
    }
}

fn conv_forward<T: Real>(store: &ParamStore<T>, c: &ConvIds, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut y = conv2d(x, store.value(c.kernel), c.stride)?;
    if let Some(a) = c.adapter {
        conv2d_accumulate(x, store.value(a), c.stride, &mut y)?;
    }
    Ok(y)
}

fn conv_backward<T: Real>(
    store: &mut ParamStore<T>,
    c: &ConvIds,
    x: &Tensor<T>,
    dy: &Tensor<T>,
    mut dx: Option<&mut Tensor<T>>,
) -> Result<()> {
    for id in std::iter::once(c.kernel).chain(c.adapter) {
        let i = id.index();
        let dk = if store.trainable[i] { Some(&mut store.grads[i]) } else { None };
        if dk.is_none() && dx.is_none() {
            continue;
        }
        conv2d_backward(x, &store.values[i], c.stride, dy, dk, dx.as_deref_mut())?;
    }
    Ok(())
}

fn bn_forward<T: Real>(
    store: &mut ParamStore<T>,
    bn: &BnIds,
    x: &Tensor<T>,
    valid: Option<&[usize]>,
    mode: Mode,
    momentum: f64,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let mode = if mode == Mode::Train && store.is_trainable(bn.gamma) {
        Mode::Train
    } else {
        Mode::Eval
    };
    let [g, b, m, v] = store
        .values
        .get_disjoint_mut([bn.gamma.index(), bn.beta.index(), bn.mean.index(), bn.var.index()])
        .expect("distinct batch-norm handles");
    batch_norm(
        x,
        BnParams {
            gamma: g,
            beta: b,
            running_mean: m,
            running_var: v,
            momentum,
        },
        valid,
        mode,
    )
}

fn bn_backward<T: Real>(
    store: &mut ParamStore<T>,
    bn: &BnIds,
    dy: &Tensor<T>,
    cache: &BnCache<T>,
    valid: Option<&[usize]>,
) -> Result<Tensor<T>> {
    let (gi, bi) = (bn.gamma.index(), bn.beta.index());
    let [dg, db] = store.grads.get_disjoint_mut([gi, bi]).expect("distinct");
    let grads = BnGrads {
        gamma: store.trainable[gi].then_some(dg),
        beta: store.trainable[bi].then_some(db),
    };
    batch_norm_backward(dy, &store.values[gi], cache, valid, grads)
}

fn dense_bwd<T: Real>(
    store: &mut ParamStore<T>,
    w: ParamId,
    b: ParamId,
    x: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (wi, bi) = (w.index(), b.index());
    let [dw, db] = store.grads.get_disjoint_mut([wi, bi]).expect("distinct");
    dense_backward(
        x,
        &store.values[wi],
        dy,
        store.trainable[wi].then_some(dw),
        store.trainable[bi].then_some(db),
    )
}

impl DomainView {
    /// Whether any parameter below the head receives a gradient.
    fn backbone_trainable<T: Real>(&self, store: &ParamStore<T>) -> bool {
        let convs = std::iter::once(&self.stem).chain(self.blocks.iter().flat_map(|b| [&b.conv1, &b.conv2]));
        let conv_ids = convs.flat_map(|c| std::iter::once(c.kernel).chain(c.adapter));
        let bn_ids = std::iter::once(&self.stem_bn)
            .chain(self.blocks.iter().flat_map(|b| [&b.bn1, &b.bn2]))
            .chain([&self.final_bn])
            .flat_map(|b| [b.gamma, b.beta]);
        let a = &self.attention;
        conv_ids
            .chain(bn_ids)
            .chain([a.w, a.b, a.u])
            .any(|id| store.is_trainable(id))
    }
}

impl Architecture {
    /// `input: [B, mel_bands, T, 1]`, `valid`: frames per item. Returns logits
    /// `[B, K]`. Dropout is active only in train mode with an RNG supplied.
    pub fn forward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        domain: &str,
        input: &Tensor<T>,
        valid: &[usize],
        mode: Mode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Tensor<T>, Trace<T>)> {
        let v = self.view(domain)?;
        let shape = input.shape();
        if shape.len() != 4 || shape[1] != self.config.mel_bands || shape[3] != 1 {
            return Err(Error::shape(
                "model forward",
                format!("input {shape:?}, expected [B, {}, T, 1]", self.config.mel_bands),
            ));
        }
        if valid.len() != shape[0] || valid.iter().any(|&f| f > shape[2]) {
            return Err(Error::shape(
                "model forward",
                format!("valid frames {valid:?} for input {shape:?}"),
            ));
        }
        let mut input = input.clone();
        zero_invalid(&mut input, valid);
        let mut valids = vec![valid.to_vec()];
        let z = conv_forward(store, &v.stem, &input)?;
        let (stem_out, stem_bn) = bn_forward(store, &v.stem_bn, &z, Some(valid), mode, self.config.bn_momentum)?;
        let mut acts = vec![stem_out];
        let mut blocks = Vec::with_capacity(v.blocks.len());
        for b in &v.blocks {
            let x = acts.last().expect("stem");
            let valid_in = valids.last().expect("stem").clone();
            let valid_out = if b.conv1.stride == 2 {
                halve_extents(&valid_in)
            } else {
                valid_in.clone()
            };
            let z1 = conv_forward(store, &b.conv1, x)?;
            let (mut h1, bn1) = bn_forward(store, &b.bn1, &z1, Some(&valid_out), mode, self.config.bn_momentum)?;
            drop(z1);
            relu(&mut h1);
            let z2 = conv_forward(store, &b.conv2, &h1)?;
            let (mut out, bn2) = bn_forward(store, &b.bn2, &z2, Some(&valid_out), mode, self.config.bn_momentum)?;
            drop(z2);
            if b.shortcut {
                out.add_assign(&pooled_shortcut(x, &valid_in)?)?;
            } else {
                out.add_assign(x)?;
            }
            relu(&mut out);
            blocks.push(BlockTrace {
                valid_out: valid_out.clone(),
                bn1,
                h1,
                bn2,
            });
            acts.push(out);
            valids.push(valid_out);
        }
        let last_valid = valids.last().expect("stem");
        let (mut features, final_bn) = bn_forward(
            store,
            &v.final_bn,
            acts.last().expect("stem"),
            Some(last_valid),
            mode,
            self.config.bn_momentum,
        )?;
        relu(&mut features);
        let a = &v.attention;
        let (pooled, attention) = attention_pool(
            &features,
            &AttentionParams {
                w: store.value(a.w),
                b: store.value(a.b),
                u: store.value(a.u),
                lambda: self.config.attention_lambda,
            },
            last_valid,
        )?;
        let h = &v.head;
        let hidden = dense(&pooled, store.value(h.w1), &Tensor::zeros(&[self.config.head_units]))?;
        let (mut head_act, head_bn) = bn_forward(store, &h.bn, &hidden, None, mode, self.config.bn_momentum)?;
        relu(&mut head_act);
        let mut dropped = head_act.clone();
        let dropout_mask = match (mode, rng) {
            (Mode::Train, Some(rng)) => dropout(&mut dropped, self.config.dropout_rate, true, rng),
            _ => Vec::new(),
        };
        let logits = dense(&dropped, store.value(h.w2), store.value(h.b2))?;
        let trace = Trace {
            input,
            valid_in: valid.to_vec(),
            stem_bn,
            acts,
            valid: valids,
            blocks,
            final_bn,
            features,
            attention,
            pooled,
            head_bn,
            head_act,
            dropout_mask,
            dropped,
        };
        Ok((logits, trace))
    }

    /// Accumulates gradients of trainable parameters given `dL/dlogits`.
    pub fn backward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        domain: &str,
        tr: &Trace<T>,
        dlogits: &Tensor<T>,
    ) -> Result<()> {
        let v = self.view(domain)?;
        let h = &v.head;
        let mut d = dense_bwd(store, h.w2, h.b2, &tr.dropped, dlogits)?;
        dropout_backward(&mut d, &tr.dropout_mask);
        relu_backward(&tr.head_act, &mut d);
        let d = bn_backward(store, &h.bn, &d, &tr.head_bn, None)?;
        let w1 = h.w1.index();
        let dw1 = store.trainable[w1].then_some(&mut store.grads[w1]);
        let d_pooled = dense_backward(&tr.pooled, &store.values[w1], &d, dw1, None)?;
        if !v.backbone_trainable(store) {
            return Ok(());
        }

        let a = v.attention;
        let last_valid = tr.valid.last().expect("stem");
        let mut d = {
            let [gw, gb, gu] = store
                .grads
                .get_disjoint_mut([a.w.index(), a.b.index(), a.u.index()])
                .expect("distinct");
            let t = &store.trainable;
            attention_pool_backward(
                &tr.features,
                &AttentionParams {
                    w: &store.values[a.w.index()],
                    b: &store.values[a.b.index()],
                    u: &store.values[a.u.index()],
                    lambda: self.config.attention_lambda,
                },
                last_valid,
                &tr.attention,
                &d_pooled,
                AttentionGrads {
                    w: t[a.w.index()].then_some(gw),
                    b: t[a.b.index()].then_some(gb),
                    u: t[a.u.index()].then_some(gu),
                },
            )?
        };
        relu_backward(&tr.features, &mut d);
        let mut d = bn_backward(store, &v.final_bn, &d, &tr.final_bn, Some(last_valid))?;

        for (i, (b, bt)) in v.blocks.iter().zip(&tr.blocks).enumerate().rev() {
            let x = &tr.acts[i];
            let valid_in = &tr.valid[i];
            relu_backward(&tr.acts[i + 1], &mut d);
            let mut dx = if b.shortcut {
                pooled_shortcut_backward(x.shape(), &d, valid_in)
            } else {
                d.clone()
            };
            let dz2 = bn_backward(store, &b.bn2, &d, &bt.bn2, Some(&bt.valid_out))?;
            let mut dh1 = Tensor::zeros(bt.h1.shape());
            conv_backward(store, &b.conv2, &bt.h1, &dz2, Some(&mut dh1))?;
            drop(dz2);
            relu_backward(&bt.h1, &mut dh1);
            let dz1 = bn_backward(store, &b.bn1, &dh1, &bt.bn1, Some(&bt.valid_out))?;
            conv_backward(store, &b.conv1, x, &dz1, Some(&mut dx))?;
            d = dx;
        }
        let dz = bn_backward(store, &v.stem_bn, &d, &tr.stem_bn, Some(&tr.valid_in))?;
        conv_backward(store, &v.stem, &tr.input, &dz, None)
    }
}
