//! Stream 3: edge-filtered intermediary images, cross-modal attention over
//! space-time tokens, bidirectional recurrent pooling, and the
//! cross-reconstruction loss.

use std::collections::BTreeMap;

use crate::autodiff::nn::{Attention, Bound, Conv2d, Linear, LstmCell, ParamStore};
use crate::autodiff::{Tensor, Var};
use crate::config::{CrOperands, Modality};
use crate::error::{ReidError, Result};
use crate::rng::ReidRng;

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// A 3x3 correlation kernel plus a constant offset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeOperator {
    pub kernel: [[f64; 3]; 3],
    pub offset: f64,
}

impl Default for EdgeOperator {
    fn default() -> Self {
        Self::laplacian(0.0)
    }
}

impl EdgeOperator {
    pub fn laplacian(offset: f64) -> Self {
        Self { kernel: [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]], offset }
    }

    /// Row-major nine values.
    pub fn from_slice(values: &[f64], offset: f64) -> Result<Self> {
        if values.len() != 9 {
            return Err(ReidError::config("edge_kernel", format!("needs exactly 9 values, got {}", values.len())));
        }
        let mut kernel = [[0.0; 3]; 3];
        for (i, v) in values.iter().enumerate() {
            kernel[i / 3][i % 3] = *v;
        }
        Ok(Self { kernel, offset })
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r as usize
}

/// Single intensity plane: luma for visible frames, the first channel for
/// infrared.
pub fn intensity(frame: &Tensor, modality: Modality) -> Result<Vec<f64>> {
    if frame.rank() != 3 {
        return Err(ReidError::Shape(format!("frame must be [C, H, W], got {:?}", frame.shape())));
    }
    let plane = frame.dim(1) * frame.dim(2);
    let d = frame.data();
    match (modality, frame.dim(0)) {
        (Modality::Visible, 3) => Ok((0..plane).map(|i| LUMA[0] * d[i] + LUMA[1] * d[plane + i] + LUMA[2] * d[2 * plane + i]).collect()),
        (Modality::Infrared, 1 | 3) => Ok(d[..plane].to_vec()),
        (m, c) => Err(ReidError::Shape(format!("{m} frame with {c} channels"))),
    }
}

/// Edge response of one frame, `[1, H, W]`, with reflect padding.
pub fn anaglyph(frame: &Tensor, modality: Modality, op: &EdgeOperator) -> Result<Tensor> {
    let (h, w) = (frame.dim(1), frame.dim(2));
    if h < 3 || w < 3 {
        return Err(ReidError::Shape(format!("anaglyph needs at least 3x3, got {h}x{w}")));
    }
    let x = intensity(frame, modality)?;
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (m, row) in op.kernel.iter().enumerate() {
                let y = reflect(i as isize + m as isize - 1, h);
                for (n, k) in row.iter().enumerate() {
                    acc += x[y * w + reflect(j as isize + n as isize - 1, w)] * k;
                }
            }
            out[i * w + j] = acc + op.offset;
        }
    }
    Ok(Tensor::new([1, h, w], out))
}

/// Anaglyphs for every frame of `[N, 3, H, W]`.
pub fn anaglyph_batch(pixels: &Tensor, frame_modalities: &[Modality], op: &EdgeOperator) -> Result<Tensor> {
    let (n, h, w) = (pixels.dim(0), pixels.dim(2), pixels.dim(3));
    let len = 3 * h * w;
    let mut data = Vec::with_capacity(n * h * w);
    for (i, &m) in frame_modalities.iter().enumerate() {
        let frame = Tensor::new([3, h, w], pixels.data()[i * len..(i + 1) * len].to_vec());
        data.extend(anaglyph(&frame, m, op)?.into_data());
    }
    Ok(Tensor::new([n, 1, h, w], data))
}

/// `[T, C, h, w]` volume as `[1, T*h*w, C]` tokens.
pub fn volume_tokens<'g>(v: Var<'g>) -> Var<'g> {
    let s = v.shape();
    v.permute(&[0, 2, 3, 1]).reshape(&[1, s[0] * s[2] * s[3], s[1]])
}

/// Each modality's tokens attend over the other's, with a residual.
pub fn cross_attend_3d<'g>(attn: &Attention, p: &Bound<'g>, vis: Var<'g>, ir: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
    if vis.shape() != ir.shape() {
        return Err(ReidError::Shape(format!("cross-attention shapes {:?} vs {:?}", vis.shape(), ir.shape())));
    }
    let v2 = vis.add(attn.attend(p, vis, ir));
    let i2 = ir.add(attn.attend(p, ir, vis));
    Ok((v2, i2))
}

/// Same-identity visible/infrared tracklets, paired by sorted position.
pub fn pair_modalities(ids: &[u32], modalities: &[Modality]) -> Vec<(usize, usize)> {
    let mut groups: BTreeMap<u32, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, (&id, &m)) in ids.iter().zip(modalities).enumerate() {
        let e = groups.entry(id).or_default();
        match m {
            Modality::Visible => e.0.push(i),
            Modality::Infrared => e.1.push(i),
        }
    }
    groups.into_values().flat_map(|(v, r)| v.into_iter().zip(r)).collect()
}

/// `sum_i |v_i - R(r_i)| + |r_i - R(v_i)|`, divided by the number of rows.
pub fn loss_cr<'g>(vis: Var<'g>, ir: Var<'g>, recon: impl Fn(Var<'g>) -> Var<'g>) -> Result<Var<'g>> {
    if vis.shape() != ir.shape() {
        return Err(ReidError::Shape(format!("cross-reconstruction operands {:?} vs {:?}", vis.shape(), ir.shape())));
    }
    let n = vis.dim(0);
    if n == 0 {
        return Err(ReidError::InvalidArgument("cross-reconstruction needs at least one pair".into()));
    }
    let flat = |x: Var<'g>| {
        let f = x.shape().iter().skip(1).product();
        x.reshape(&[n, f])
    };
    let a = flat(vis.sub(recon(ir))).norm_last().sum();
    let b = flat(ir.sub(recon(vis))).norm_last().sum();
    Ok(a.add(b).mul_scalar(1.0 / n as f64))
}

/// Two-layer convolutional reconstruction network.
#[derive(Clone, Copy, Debug)]
pub struct Reconstructor {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl Reconstructor {
    pub fn new(store: &mut ParamStore, channels: usize, hidden: usize, rng: &mut ReidRng) -> Self {
        Self {
            conv1: Conv2d::new(store, "s3.recon.conv1", channels, hidden, 3, 1, 1, true, rng),
            conv2: Conv2d::new(store, "s3.recon.conv2", hidden, channels, 3, 1, 1, true, rng),
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        self.conv2.forward(p, self.conv1.forward(p, x).relu())
    }
}

/// Operands for the cross-reconstruction loss: matched frames of paired
/// tracklets.
pub struct CrInputs<'g> {
    pub vis: Var<'g>,
    pub ir: Var<'g>,
}

pub struct IntermediaryOutput<'g> {
    pub features: Var<'g>,
    pub cr: Option<CrInputs<'g>>,
}

#[derive(Clone, Debug)]
pub struct IntermediaryStream {
    pub edge: EdgeOperator,
    pub operands: CrOperands,
    conv1: Conv2d,
    conv2: Conv2d,
    pub cross: Attention,
    forward_cell: LstmCell,
    backward_cell: LstmCell,
    head: Linear,
    pub recon: Reconstructor,
}

impl IntermediaryStream {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        edge: EdgeOperator,
        operands: CrOperands,
        width: usize,
        hidden: usize,
        dim: usize,
        rng: &mut ReidRng,
    ) -> Self {
        let c = 4 * width;
        let recon_channels = match operands {
            CrOperands::Features => c,
            CrOperands::Pixels => 1,
        };
        Self {
            edge,
            operands,
            conv1: Conv2d::new(store, "s3.conv1", 1, 2 * width, 3, 2, 1, true, rng),
            conv2: Conv2d::new(store, "s3.conv2", 2 * width, c, 3, 2, 1, true, rng),
            cross: Attention::new(store, "s3.cross", c, rng),
            forward_cell: LstmCell::new(store, "s3.lstm_fwd", c, hidden, rng),
            backward_cell: LstmCell::new(store, "s3.lstm_bwd", c, hidden, rng),
            head: Linear::new(store, "s3.head", 2 * hidden, dim, true, rng),
            recon: Reconstructor::new(store, recon_channels, 8.max(recon_channels), rng),
        }
    }

    /// `raw` holds `[B * T, 3, H, W]` frames in `[0, 1]`; `partner[b]` names
    /// the tracklet that `b` attends over (itself when unpaired). `pairs`
    /// selects the visible/infrared tracklets used for reconstruction.
    pub fn forward<'g>(
        &self,
        p: &Bound<'g>,
        raw: &Tensor,
        frame_modalities: &[Modality],
        tracklets: usize,
        partner: &[usize],
        pairs: &[(usize, usize)],
    ) -> Result<IntermediaryOutput<'g>> {
        let g = p.var(self.head.weight).graph();
        let ana = anaglyph_batch(raw, frame_modalities, &self.edge)?;
        let n = ana.dim(0);
        let t = n / tracklets;
        let ana_var = g.constant(ana);
        let maps = self.conv2.forward(p, self.conv1.forward(p, ana_var).relu()).relu();
        let s = maps.shape();
        let (c, hw) = (s[1], s[2] * s[3]);
        let tokens = maps.reshape(&[tracklets, t, c, hw]).permute(&[0, 1, 3, 2]).reshape(&[tracklets, t * hw, c]);
        let context = tokens.index_select(partner);
        let mixed = tokens.add(self.cross.attend(p, tokens, context));
        let per_frame = mixed.reshape(&[tracklets, t, hw, c]).mean_axis(2, false);
        let fwd = self.forward_cell.run(p, per_frame, false);
        let bwd = self.backward_cell.run(p, per_frame, true);
        let features = self.head.forward(p, Var::concat(&[fwd, bwd], 1));

        let cr = if pairs.is_empty() {
            None
        } else {
            let frames = |sel: &dyn Fn(&(usize, usize)) -> usize| -> Vec<usize> {
                pairs.iter().flat_map(|pr| (0..t).map(move |k| sel(pr) * t + k)).collect()
            };
            let (vi, ri) = (frames(&|pr| pr.0), frames(&|pr| pr.1));
            let source = match self.operands {
                CrOperands::Features => maps,
                CrOperands::Pixels => ana_var,
            };
            Some(CrInputs { vis: source.index_select(&vi), ir: source.index_select(&ri) })
        };
        Ok(IntermediaryOutput { features, cr })
    }

    pub fn reconstruction_loss<'g>(&self, p: &Bound<'g>, cr: &CrInputs<'g>) -> Result<Var<'g>> {
        loss_cr(cr.vis, cr.ir, |x| self.recon.forward(p, x))
    }
}

/// Partner index per tracklet: its pair on the other modality, else itself.
pub fn partners(n: usize, pairs: &[(usize, usize)]) -> Vec<usize> {
    let mut out: Vec<usize> = (0..n).collect();
    for &(v, r) in pairs {
        out[v] = r;
        out[r] = v;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::rng::derive_rng;

    #[test]
    fn constant_image_gives_offset_everywhere() {
        let f = Tensor::full([3, 5, 4], 0.7);
        let out = anaglyph(&f, Modality::Visible, &EdgeOperator::laplacian(0.0)).unwrap();
        assert!(out.data().iter().all(|v| v.abs() < 1e-12));
        let out = anaglyph(&f, Modality::Infrared, &EdgeOperator::laplacian(5.0)).unwrap();
        assert!(out.data().iter().all(|v| (v - 5.0).abs() < 1e-12));
    }

    #[test]
    fn impulse_response_with_reflect_padding() {
        let mut d = vec![0.0; 9];
        d[4] = 1.0;
        let f = Tensor::new([1, 3, 3], d);
        let out = anaglyph(&f, Modality::Infrared, &EdgeOperator::laplacian(0.0)).unwrap();
        // centre sees -4; edge-adjacent cells see the impulse once directly and
        // once more through the reflected border
        assert_eq!(out.data(), &[0.0, 2.0, 0.0, 2.0, -4.0, 2.0, 0.0, 2.0, 0.0]);
        let shifted = anaglyph(&f, Modality::Infrared, &EdgeOperator::laplacian(5.0)).unwrap();
        assert!(shifted.data().iter().zip(out.data()).all(|(a, b)| a - b == 5.0));
        assert!(anaglyph(&Tensor::zeros([1, 2, 5]), Modality::Infrared, &EdgeOperator::default()).is_err());
    }

    #[test]
    fn pairs_match_by_sorted_position() {
        let ids = [1, 1, 2, 1, 2, 3];
        let mods = [Modality::Infrared, Modality::Visible, Modality::Visible, Modality::Infrared, Modality::Infrared, Modality::Visible];
        assert_eq!(pair_modalities(&ids, &mods), vec![(1, 0), (2, 4)]);
        assert_eq!(partners(6, &[(1, 0), (2, 4)]), vec![1, 0, 4, 3, 2, 5]);
    }

    #[test]
    fn cross_attention_residual_identity_and_uniform_mean() {
        let mut rng = derive_rng(0, "x", 0);
        let mut store = ParamStore::new();
        let attn = Attention::new(&mut store, "a", 3, &mut rng);
        let x = Tensor::from_fn([1, 5, 3], |i| (i as f64).sin());
        {
            let mut zeroed = store.clone();
            zeroed.get_mut(attn.o.weight).data_mut().fill(0.0);
            let g = Graph::new();
            let p = zeroed.bind(&g, false);
            let (a, b) = cross_attend_3d(&attn, &p, g.constant(x.clone()), g.constant(x.clone())).unwrap();
            assert_eq!(*a.value(), x);
            assert_eq!(*b.value(), x);
        }
        store.get_mut(attn.q.weight).data_mut().fill(0.0);
        *store.get_mut(attn.v.weight) = Tensor::eye(3);
        *store.get_mut(attn.o.weight) = Tensor::eye(3);
        let g = Graph::new();
        let p = store.bind(&g, false);
        let (a, _) = cross_attend_3d(&attn, &p, g.constant(x.clone()), g.constant(x.clone())).unwrap();
        let mean = x.sum_axis(1, true);
        for i in 0..5 {
            for c in 0..3 {
                let expected = x.data()[i * 3 + c] + mean.data()[c] / 5.0;
                assert!((a.value().data()[i * 3 + c] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loss_cr_hand_cases() {
        let g = Graph::new();
        let v = g.constant(Tensor::from_rows(&[vec![1.0, 0.0]]));
        let r = g.constant(Tensor::from_rows(&[vec![0.0, 0.0]]));
        assert!((loss_cr(v, r, |x| x).unwrap().item() - 2.0).abs() < 1e-12);
        assert_eq!(loss_cr(v, v, |x| x).unwrap().item(), 0.0);
        let a = g.constant(Tensor::from_fn([3, 4], |i| (i as f64 * 0.7).sin()));
        let b = g.constant(Tensor::from_fn([3, 4], |i| (i as f64 * 1.3).cos()));
        assert_eq!(loss_cr(a, b, |x| x).unwrap().item(), loss_cr(b, a, |x| x).unwrap().item());
        assert!(loss_cr(a, v, |x| x).is_err());
    }

    #[test]
    fn stream_paths() {
        let mut rng = derive_rng(0, "s3", 0);
        let mut store = ParamStore::new();
        let s = IntermediaryStream::new(&mut store, EdgeOperator::default(), CrOperands::Features, 2, 4, 5, &mut rng);
        let g = Graph::new();
        let p = store.bind(&g, false);
        let raw = Tensor::from_fn([4, 3, 16, 8], |i| ((i * 7919) % 101) as f64 / 100.0);
        let mods = [Modality::Visible; 4];
        let out = s.forward(&p, &raw, &mods, 2, &[0, 1], &[]).unwrap();
        assert_eq!(out.features.shape(), vec![2, 5]);
        assert!(out.cr.is_none());
        let again = s.forward(&p, &raw, &mods, 2, &[0, 1], &[]).unwrap();
        assert_eq!(*out.features.value(), *again.features.value());
        let mods = [Modality::Visible, Modality::Visible, Modality::Infrared, Modality::Infrared];
        let out = s.forward(&p, &raw, &mods, 2, &[1, 0], &[(0, 1)]).unwrap();
        let cr = out.cr.unwrap();
        assert_eq!(cr.vis.shape(), vec![2, 8, 4, 2]);
        assert!(s.reconstruction_loss(&p, &cr).unwrap().item() >= 0.0);
        let single = s.forward(&p, &raw.narrow(0, 0, 1), &mods[..1], 1, &[0], &[]).unwrap();
        assert_eq!(single.features.shape(), vec![1, 5]);
    }
}
