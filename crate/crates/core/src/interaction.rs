//! Image–pseudo (IPC) and pseudo–pseudo (PIA) cross-attention forwards.
//!
//! Single-head scaled dot-product attention at full spatial resolution with
//! bias-free projections. Every pixel is a token; a C×H×W tensor becomes HW
//! tokens of width C. After each stage an independent 3×3 σ head per path
//! predicts a raw log-variance map.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Conv2d, Padding, Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T: Real = f32> {
    /// d_in × d_att query projection.
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    /// One 3×3 d_att→1 head per pseudo-label path.
    pub sigma_heads: Vec<Conv2d<T>>,
}

impl<T: Real> AttentionParams<T> {
    /// Zero σ heads and identity-like projections of width `d_att`.
    pub fn new(w_q: Tensor<T>, w_k: Tensor<T>, w_v: Tensor<T>, paths: usize) -> Result<Self> {
        let p = Self {
            sigma_heads: Vec::new(),
            w_q,
            w_k,
            w_v,
        };
        let d_att = p.d_att()?;
        Ok(Self {
            sigma_heads: (0..paths)
                .map(|_| Conv2d::zeros(1, d_att, 3, Padding::Same))
                .collect(),
            ..p
        })
    }

    pub fn d_in(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn d_att(&self) -> Result<usize> {
        let shape_of = |t: &Tensor<T>| match t.shape() {
            [a, b] => Ok((*a, *b)),
            s => Err(Error::shape(
                "attention params",
                format!("projection must be d_in×d_att, got {s:?}"),
            )),
        };
        let (qi, qa) = shape_of(&self.w_q)?;
        let (ki, ka) = shape_of(&self.w_k)?;
        let (vi, va) = shape_of(&self.w_v)?;
        if qi != ki || qi != vi || qa != ka || qa != va {
            return Err(Error::shape(
                "attention params",
                format!("W_q {qi}×{qa}, W_k {ki}×{ka}, W_v {vi}×{va} disagree"),
            ));
        }
        Ok(qa)
    }

    pub fn to_named(&self, prefix: &str) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        out.insert(format!("{prefix}.w_q"), self.w_q.clone());
        out.insert(format!("{prefix}.w_k"), self.w_k.clone());
        out.insert(format!("{prefix}.w_v"), self.w_v.clone());
        for (i, h) in self.sigma_heads.iter().enumerate() {
            out.insert(format!("{prefix}.sigma{i}.weight"), h.weight.clone());
            out.insert(
                format!("{prefix}.sigma{i}.bias"),
                Tensor::new(vec![h.bias.len()], h.bias.clone()).expect("nonempty bias"),
            );
        }
        out
    }

    pub fn from_named(named: &BTreeMap<String, Tensor<T>>, prefix: &str) -> Result<Self> {
        let get = |name: String| {
            named
                .get(&name)
                .cloned()
                .ok_or_else(|| Error::Format(format!("bundle is missing `{name}`")))
        };
        let mut sigma_heads = Vec::new();
        while let (Some(w), Some(b)) = (
            named.get(&format!("{prefix}.sigma{}.weight", sigma_heads.len())),
            named.get(&format!("{prefix}.sigma{}.bias", sigma_heads.len())),
        ) {
            sigma_heads.push(Conv2d {
                weight: w.clone(),
                bias: b.data().to_vec(),
                padding: Padding::Same,
            });
        }
        let p = Self {
            w_q: get(format!("{prefix}.w_q"))?,
            w_k: get(format!("{prefix}.w_k"))?,
            w_v: get(format!("{prefix}.w_v"))?,
            sigma_heads,
        };
        p.d_att()?;
        Ok(p)
    }
}

/// Projects C×H×W features to HW tokens of width d (row-major token matrix).
fn project<T: Real>(feat: &Tensor<T>, w: &Tensor<T>) -> Result<Vec<f64>> {
    let (c, h, wd) = feat.dims3()?;
    let [d_in, d] = w.shape()[..] else {
        return Err(Error::shape(
            "project",
            format!("bad projection {:?}", w.shape()),
        ));
    };
    if d_in != c {
        return Err(Error::shape(
            "attention",
            format!("features have {c} channels, projection expects d_in={d_in}"),
        ));
    }
    let n = h * wd;
    let x = feat.data();
    let wm = w.data();
    let mut out = vec![0f64; n * d];
    for ch in 0..c {
        let plane = &x[ch * n..(ch + 1) * n];
        let wrow = &wm[ch * d..(ch + 1) * d];
        for (p, &v) in plane.iter().enumerate() {
            let v = v.as_f64();
            for (o, &wv) in out[p * d..(p + 1) * d].iter_mut().zip(wrow) {
                *o += v * wv.as_f64();
            }
        }
    }
    Ok(out)
}

/// Softmax attention rows: `n_q` rows over `n_k` keys.
fn attention_matrix(q: &[f64], k: &[f64], d: usize) -> Vec<f64> {
    let (n_q, n_k) = (q.len() / d, k.len() / d);
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0f64; n_q * n_k];
    for i in 0..n_q {
        let qi = &q[i * d..(i + 1) * d];
        let row = &mut out[i * n_k..(i + 1) * n_k];
        for (j, r) in row.iter_mut().enumerate() {
            *r = qi
                .iter()
                .zip(&k[j * d..(j + 1) * d])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                * scale;
        }
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for r in row.iter_mut() {
            *r = (*r - m).exp();
            z += *r;
        }
        for r in row.iter_mut() {
            *r /= z;
        }
    }
    out
}

fn attend<T: Real>(
    queries: &Tensor<T>,
    keyvals: &[&Tensor<T>],
    params: &AttentionParams<T>,
) -> Result<Tensor<T>> {
    let d = params.d_att()?;
    let (_, h, w) = queries.dims3()?;
    let q = project(queries, &params.w_q)?;
    let mut k = Vec::new();
    let mut v = Vec::new();
    for kv in keyvals {
        k.extend(project(kv, &params.w_k)?);
        v.extend(project(kv, &params.w_v)?);
    }
    let a = attention_matrix(&q, &k, d);
    let (n_q, n_k) = (h * w, k.len() / d);
    // Output laid out channel-major: d × H × W.
    let mut out = vec![0f64; d * n_q];
    for i in 0..n_q {
        let row = &a[i * n_k..(i + 1) * n_k];
        for (j, &wgt) in row.iter().enumerate() {
            for (c, &vv) in v[j * d..(j + 1) * d].iter().enumerate() {
                out[c * n_q + i] += wgt * vv;
            }
        }
    }
    Tensor::new(vec![d, h, w], out.into_iter().map(T::of).collect())
}

fn check_spatial<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: &'static str) -> Result<()> {
    let (_, ha, wa) = a.dims3()?;
    let (_, hb, wb) = b.dims3()?;
    if (ha, wa) != (hb, wb) {
        return Err(Error::shape(op, format!("{ha}×{wa} vs {hb}×{wb}")));
    }
    Ok(())
}

/// IPC: image features are queries, pseudo-label features supply keys and values.
pub fn ipc_forward<T: Real>(
    img_feat: &Tensor<T>,
    pl_feat: &Tensor<T>,
    params: &AttentionParams<T>,
) -> Result<Tensor<T>> {
    check_spatial(img_feat, pl_feat, "ipc_forward")?;
    attend(img_feat, &[pl_feat], params)
}

/// The HW×HW softmax matrix of an IPC call (rows are query pixels).
pub fn ipc_attention<T: Real>(
    img_feat: &Tensor<T>,
    pl_feat: &Tensor<T>,
    params: &AttentionParams<T>,
) -> Result<Vec<f64>> {
    check_spatial(img_feat, pl_feat, "ipc_attention")?;
    let d = params.d_att()?;
    Ok(attention_matrix(
        &project(img_feat, &params.w_q)?,
        &project(pl_feat, &params.w_k)?,
        d,
    ))
}

/// PIA: path `i` queries the concatenated tokens of every other path.
pub fn pia_forward<T: Real>(
    pl_feats: &[Tensor<T>],
    params: &AttentionParams<T>,
) -> Result<Vec<Tensor<T>>> {
    if pl_feats.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "PIA needs at least 2 paths, got {}",
            pl_feats.len()
        )));
    }
    for (i, f) in pl_feats.iter().enumerate().skip(1) {
        if f.shape() != pl_feats[0].shape() {
            return Err(Error::shape(
                "pia_forward",
                format!(
                    "path {i} is {:?}, path 0 is {:?}",
                    f.shape(),
                    pl_feats[0].shape()
                ),
            ));
        }
    }
    (0..pl_feats.len())
        .map(|i| {
            let others: Vec<&Tensor<T>> = pl_feats
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, f)| f)
                .collect();
            attend(&pl_feats[i], &others, params)
        })
        .collect()
}

/// Raw log-variance map from one σ head.
pub fn sigma_head<T: Real>(fused: &Tensor<T>, head: &Conv2d<T>) -> Result<Tensor<T>> {
    if head.c_out() != 1 {
        return Err(Error::shape(
            "sigma_head",
            format!("σ head must have one output channel, has {}", head.c_out()),
        ));
    }
    let (_, h, w) = fused.dims3()?;
    head.forward(fused)?.reshape(&[h, w])
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionOrder {
    #[default]
    IpcThenPia,
    PiaThenIpc,
}

#[derive(Clone, Debug)]
pub struct InteractionOutput<T: Real = f32> {
    pub fused: Vec<Tensor<T>>,
    /// σ maps after the first stage, one per path.
    pub sigmas_first: Vec<Tensor<T>>,
    /// σ maps after the second stage; these feed the uncertainty loss.
    pub sigmas: Vec<Tensor<T>>,
}

fn sigmas_for<T: Real>(fused: &[Tensor<T>], params: &AttentionParams<T>) -> Result<Vec<Tensor<T>>> {
    if params.sigma_heads.len() != fused.len() {
        return Err(Error::shape(
            "sigma heads",
            format!(
                "{} heads for {} paths",
                params.sigma_heads.len(),
                fused.len()
            ),
        ));
    }
    fused
        .iter()
        .zip(&params.sigma_heads)
        .map(|(f, h)| sigma_head(f, h))
        .collect()
}

/// Both interaction stages in the requested order, with σ heads after each.
///
/// For IPC→PIA the IPC projections take the raw feature width and the PIA
/// projections take IPC's output width; PIA→IPC swaps those roles.
pub fn interaction_forward<T: Real>(
    img_feat: &Tensor<T>,
    pl_feats: &[Tensor<T>],
    ipc: &AttentionParams<T>,
    pia: &AttentionParams<T>,
    order: InteractionOrder,
) -> Result<InteractionOutput<T>> {
    let (first, first_params, second_params) = match order {
        InteractionOrder::IpcThenPia => (
            pl_feats
                .iter()
                .map(|p| ipc_forward(img_feat, p, ipc))
                .collect::<Result<Vec<_>>>()?,
            ipc,
            pia,
        ),
        InteractionOrder::PiaThenIpc => (pia_forward(pl_feats, pia)?, pia, ipc),
    };
    let sigmas_first = sigmas_for(&first, first_params)?;
    let fused = match order {
        InteractionOrder::IpcThenPia => pia_forward(&first, pia)?,
        InteractionOrder::PiaThenIpc => first
            .iter()
            .map(|p| ipc_forward(img_feat, p, ipc))
            .collect::<Result<Vec<_>>>()?,
    };
    let sigmas = sigmas_for(&fused, second_params)?;
    Ok(InteractionOutput {
        fused,
        sigmas_first,
        sigmas,
    })
}
