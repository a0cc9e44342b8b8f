//! Batched evaluation with derivative channels and reverse-mode gradients.
//!
//! A batch of `m` points is evaluated for a set of channels (value and
//! selected input derivatives). Every layer holds one `rows × (C·m)` matrix
//! whose column block `c` carries channel `c`, so each dense layer is one
//! matrix product. The backward pass differentiates the channel recurrences
//! of the activation exactly, which gives parameter gradients of losses
//! that contain `φ̂_xx`, `φ̂_tt` or `φ̂_xt`.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2};

use super::network::{normalize_inputs, Activation, Architecture, Dense, NetworkParams};
use super::trig::sin_cos;
use crate::{Error, Result};

/// Derivative channel of the field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Channel {
    V,
    X,
    T,
    XX,
    TT,
    XT,
}

impl Channel {
    pub const ALL: [Channel; 6] = [Channel::V, Channel::X, Channel::T, Channel::XX, Channel::TT, Channel::XT];

    fn bit(self) -> u8 {
        1 << self as u8
    }
}

/// Set of channels to propagate. Always contains the value; second
/// derivatives pull in the first derivatives they depend on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelSet {
    bits: u8,
}

impl ChannelSet {
    pub const VALUE: ChannelSet = ChannelSet { bits: 1 };

    pub fn new(channels: &[Channel]) -> Self {
        let mut bits = Channel::V.bit();
        for &c in channels {
            bits |= c.bit();
            match c {
                Channel::XX => bits |= Channel::X.bit(),
                Channel::TT => bits |= Channel::T.bit(),
                Channel::XT => bits |= Channel::X.bit() | Channel::T.bit(),
                _ => {}
            }
        }
        Self { bits }
    }

    pub fn all() -> Self {
        Self::new(&Channel::ALL)
    }

    pub fn contains(&self, c: Channel) -> bool {
        self.bits & c.bit() != 0
    }

    pub fn len(&self) -> usize {
        self.bits.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Position of `c` among the present channels.
    pub fn slot(&self, c: Channel) -> Option<usize> {
        self.contains(c).then(|| (self.bits & (c.bit() - 1)).count_ones() as usize)
    }

    pub fn iter(&self) -> impl Iterator<Item = Channel> + '_ {
        Channel::ALL.into_iter().filter(|c| self.contains(*c))
    }
}

/// Velocity potential and its derivatives at a batch of points. Channels
/// that were not requested are empty.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FieldEval {
    pub phi: Vec<f64>,
    pub phi_x: Vec<f64>,
    pub phi_t: Vec<f64>,
    pub phi_xx: Vec<f64>,
    pub phi_tt: Vec<f64>,
    pub phi_xt: Vec<f64>,
}

impl FieldEval {
    pub fn zeros(n: usize, channels: ChannelSet) -> Self {
        let mut e = Self::default();
        for c in channels.iter() {
            *e.channel_mut(c) = vec![0.0; n];
        }
        e
    }

    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }

    pub fn channel(&self, c: Channel) -> &[f64] {
        match c {
            Channel::V => &self.phi,
            Channel::X => &self.phi_x,
            Channel::T => &self.phi_t,
            Channel::XX => &self.phi_xx,
            Channel::TT => &self.phi_tt,
            Channel::XT => &self.phi_xt,
        }
    }

    pub fn channel_mut(&mut self, c: Channel) -> &mut Vec<f64> {
        match c {
            Channel::V => &mut self.phi,
            Channel::X => &mut self.phi_x,
            Channel::T => &mut self.phi_t,
            Channel::XX => &mut self.phi_xx,
            Channel::TT => &mut self.phi_tt,
            Channel::XT => &mut self.phi_xt,
        }
    }

    /// `p = R A φ + ρ φ_t` at point `i`.
    pub fn pressure(&self, i: usize, r: f64, area: f64, rho: f64) -> f64 {
        r * area * self.phi[i] + rho * self.phi_t[i]
    }

    /// `u = -A φ_x` at point `i`.
    pub fn velocity(&self, i: usize, area: f64) -> f64 {
        -area * self.phi_x[i]
    }

    /// `p_t = R A φ_t + ρ φ_tt`.
    pub fn pressure_t(&self, i: usize, r: f64, area: f64, rho: f64) -> f64 {
        r * area * self.phi_t[i] + rho * self.phi_tt[i]
    }

    /// `u_t = -A φ_xt`.
    pub fn velocity_t(&self, i: usize, area: f64) -> f64 {
        -area * self.phi_xt[i]
    }
}

/// Location of one chunk inside its batch, handed to loss callbacks.
#[derive(Clone, Copy, Debug)]
pub struct ChunkView<'a> {
    pub start: usize,
    pub x: &'a [f64],
    pub t: &'a [f64],
}

struct Chunk {
    start: usize,
    len: usize,
    features: Array2<f64>,
}

/// Points with precomputed Fourier features for every requested channel.
/// Bound to the frequency matrix and input domain of the parameters it was
/// built from.
pub struct Batch {
    x: Vec<f64>,
    t: Vec<f64>,
    channels: ChannelSet,
    chunks: Vec<Chunk>,
    feature_dim: usize,
}

/// Default number of points per chunk.
pub const DEFAULT_CHUNK: usize = 256;

impl Batch {
    /// `chunk` points are processed together; loss terms that couple
    /// points must keep coupled points inside one chunk.
    pub fn new(params: &NetworkParams, x: Vec<f64>, t: Vec<f64>, channels: ChannelSet, chunk: usize) -> Result<Self> {
        if x.len() != t.len() {
            return Err(Error::InvalidArgument(format!("batch has {} x values and {} t values", x.len(), t.len())));
        }
        if chunk == 0 {
            return Err(Error::InvalidArgument("chunk size must be positive".into()));
        }
        let cfg = params.config();
        let mut chunks = Vec::new();
        let mut start = 0;
        while start < x.len() {
            let len = chunk.min(x.len() - start);
            let features = encode_chunk(
                &params.ffe_matrix,
                &x[start..start + len],
                &t[start..start + len],
                channels,
                cfg.length,
                cfg.period,
            );
            chunks.push(Chunk { start, len, features });
            start += len;
        }
        Ok(Self { x, t, channels, chunks, feature_dim: cfg.feature_dim() })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn t(&self) -> &[f64] {
        &self.t
    }

    pub fn channels(&self) -> ChannelSet {
        self.channels
    }
}

fn encode_chunk(ffe: &[f64], x: &[f64], t: &[f64], channels: ChannelSet, length: f64, period: f64) -> Array2<f64> {
    let size = ffe.len() / 2;
    let m = x.len();
    let mut f = Array2::zeros((4 * size, channels.len() * m));
    for j in 0..m {
        let (xn, tn) = normalize_inputs(x[j], t[j], length, period);
        for (col, v, scale, first, second) in
            [(0, xn, 2.0 / length, Channel::X, Channel::XX), (1, tn, 2.0 / period, Channel::T, Channel::TT)]
        {
            for k in 0..size {
                let w = 2.0 * std::f64::consts::PI * ffe[2 * k + col];
                let (s, c) = (v * w).sin_cos();
                let g = w * scale;
                let rs = 2 * size * col + k;
                let rc = rs + size;
                f[[rs, j]] = s;
                f[[rc, j]] = c;
                if let Some(sl) = channels.slot(first) {
                    f[[rs, sl * m + j]] = g * c;
                    f[[rc, sl * m + j]] = -g * s;
                }
                if let Some(sl) = channels.slot(second) {
                    f[[rs, sl * m + j]] = -g * g * s;
                    f[[rc, sl * m + j]] = -g * g * c;
                }
            }
        }
    }
    f
}

#[derive(Clone, Copy)]
struct Slots {
    m: usize,
    x: Option<usize>,
    t: Option<usize>,
    xx: Option<usize>,
    tt: Option<usize>,
    xt: Option<usize>,
}

impl Slots {
    fn new(channels: ChannelSet, m: usize) -> Self {
        Self {
            m,
            x: channels.slot(Channel::X),
            t: channels.slot(Channel::T),
            xx: channels.slot(Channel::XX),
            tt: channels.slot(Channel::TT),
            xt: channels.slot(Channel::XT),
        }
    }
}

fn weights_view<'a>(w: &'a [f64], d: &Dense) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((d.fan_out, d.fan_in), &w[d.weight_range()]).expect("layout")
}

fn affine(w: &[f64], d: &Dense, input: &Array2<f64>, m: usize) -> Array2<f64> {
    let mut z = Array2::zeros((d.fan_out, input.ncols()));
    general_mat_mul(1.0, &weights_view(w, d), input, 0.0, &mut z);
    let b = &w[d.bias_range()];
    for (mut row, &bi) in z.rows_mut().into_iter().zip(b) {
        row.iter_mut().take(m).for_each(|v| *v += bi);
    }
    z
}

/// `sin(2az)` and `cos(2az)` of the value column, one row per unit.
struct Trig {
    s: Array2<f64>,
    c: Array2<f64>,
}

fn activate(z: &Array2<f64>, s: Slots, a: f64, kind: Activation) -> (Array2<f64>, Option<Trig>) {
    if kind == Activation::Identity {
        return (z.clone(), None);
    }
    let m = s.m;
    let rows = z.nrows();
    let mut out = Array2::zeros(z.raw_dim());
    let mut trig = Trig { s: Array2::zeros((rows, m)), c: Array2::zeros((rows, m)) };
    let (two_a, inv_2a) = (2.0 * a, 0.5 / a);
    let mut d1 = vec![0.0; m];
    let mut d2 = vec![0.0; m];
    for r in 0..rows {
        let zr = z.row(r).to_slice().expect("contiguous");
        let mut orow = out.row_mut(r);
        let or = orow.as_slice_mut().expect("contiguous");
        let mut srow = trig.s.row_mut(r);
        let sr = srow.as_slice_mut().expect("contiguous");
        let mut crow = trig.c.row_mut(r);
        let cr = crow.as_slice_mut().expect("contiguous");
        for j in 0..m {
            let (sv, cv) = sin_cos(two_a * zr[j]);
            sr[j] = sv;
            cr[j] = cv;
            or[j] = zr[j] + (1.0 - cv) * inv_2a;
            d1[j] = 1.0 + sv;
            d2[j] = two_a * cv;
        }
        let col = |k: usize| k * m..(k + 1) * m;
        for k in [s.x, s.t].into_iter().flatten() {
            let (zk, ok) = (&zr[col(k)], &mut or[col(k)]);
            for j in 0..m {
                ok[j] = d1[j] * zk[j];
            }
        }
        for (k, p, q) in [(s.xx, s.x, s.x), (s.tt, s.t, s.t), (s.xt, s.x, s.t)] {
            let (Some(k), Some(p), Some(q)) = (k, p, q) else { continue };
            let (zk, zp, zq) = (&zr[col(k)], &zr[col(p)], &zr[col(q)]);
            let ok = &mut or[col(k)];
            for j in 0..m {
                ok[j] = d1[j] * zk[j] + d2[j] * zp[j] * zq[j];
            }
        }
    }
    (out, Some(trig))
}

/// Pull the adjoint of the activation output back to its pre-activation.
fn activate_backward(z: &Array2<f64>, trig: Option<&Trig>, g: &Array2<f64>, s: Slots, a: f64) -> Array2<f64> {
    let Some(trig) = trig else {
        return g.clone();
    };
    let m = s.m;
    let mut out = Array2::zeros(z.raw_dim());
    let (two_a, four_a2) = (2.0 * a, 4.0 * a * a);
    let mut d1 = vec![0.0; m];
    let mut d2 = vec![0.0; m];
    let mut d3 = vec![0.0; m];
    let zeros = vec![0.0; m];
    for r in 0..z.nrows() {
        let zr = z.row(r).to_slice().expect("contiguous");
        let gr = g.row(r).to_slice().expect("contiguous");
        let sr = trig.s.row(r).to_slice().expect("contiguous");
        let cr = trig.c.row(r).to_slice().expect("contiguous");
        let mut orow = out.row_mut(r);
        let or = orow.as_slice_mut().expect("contiguous");
        for j in 0..m {
            d1[j] = 1.0 + sr[j];
            d2[j] = two_a * cr[j];
            d3[j] = -four_a2 * sr[j];
        }
        let col = |k: Option<usize>| k.map(|k| k * m..(k + 1) * m);
        let pick = |v: &'_ [f64], k: Option<usize>| -> Vec<f64> {
            col(k).map(|rg| v[rg].to_vec()).unwrap_or_else(|| zeros.clone())
        };
        let (zx, zt, zxx, ztt, zxt) = (pick(zr, s.x), pick(zr, s.t), pick(zr, s.xx), pick(zr, s.tt), pick(zr, s.xt));
        let (gx, gt, gxx, gtt, gxt) = (pick(gr, s.x), pick(gr, s.t), pick(gr, s.xx), pick(gr, s.tt), pick(gr, s.xt));
        for j in 0..m {
            let first = gx[j] * zx[j] + gt[j] * zt[j] + gxx[j] * zxx[j] + gtt[j] * ztt[j] + gxt[j] * zxt[j];
            let second = gxx[j] * zx[j] * zx[j] + gtt[j] * zt[j] * zt[j] + gxt[j] * zx[j] * zt[j];
            or[j] = d1[j] * gr[j] + d2[j] * first + d3[j] * second;
        }
        if let Some(rg) = col(s.x) {
            let o = &mut or[rg];
            for j in 0..m {
                o[j] = d1[j] * gx[j] + d2[j] * (2.0 * zx[j] * gxx[j] + zt[j] * gxt[j]);
            }
        }
        if let Some(rg) = col(s.t) {
            let o = &mut or[rg];
            for j in 0..m {
                o[j] = d1[j] * gt[j] + d2[j] * (2.0 * zt[j] * gtt[j] + zx[j] * gxt[j]);
            }
        }
        for rg in [col(s.xx), col(s.tt), col(s.xt)].into_iter().flatten() {
            let (gk, o) = (&gr[rg.clone()], &mut or[rg]);
            for j in 0..m {
                o[j] = d1[j] * gk[j];
            }
        }
    }
    out
}

fn check_finite(arch: &Architecture, layer: usize, a: &Array2<f64>) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { location: arch.layer_name(layer) })
    }
}

struct Tape {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    trig: Vec<Option<Trig>>,
    last: Array2<f64>,
}

fn forward_chunk(
    arch: &Architecture,
    w: &[f64],
    chunk: &Chunk,
    channels: ChannelSet,
    keep: bool,
) -> Result<(FieldEval, Option<Tape>)> {
    let cfg = &arch.config;
    let m = chunk.len;
    let slots = Slots::new(channels, m);
    let mut y = affine(w, arch.input_layer(), &chunk.features, m);
    check_finite(arch, 0, &y)?;
    let mut inputs = Vec::new();
    let mut pre = Vec::new();
    let mut trigs = Vec::new();
    let mut index = 1;
    for b in 0..cfg.n_b {
        let mut h: Option<Array2<f64>> = None;
        for d in arch.block(b) {
            let input = h.take().unwrap_or_else(|| y.clone());
            let z = affine(w, d, &input, m);
            let (a, trig) = activate(&z, slots, cfg.snake_a, cfg.activation);
            check_finite(arch, index, &a)?;
            index += 1;
            if keep {
                inputs.push(input);
                pre.push(z);
                trigs.push(trig);
            }
            h = Some(a);
        }
        y += &h.expect("non-empty block");
    }
    let mut out = affine(w, arch.output_layer(), &y, m);
    out.mapv_inplace(|v| v * cfg.xi);
    check_finite(arch, index, &out)?;
    let row = out.row(0);
    let mut eval = FieldEval::default();
    for (k, c) in channels.iter().enumerate() {
        *eval.channel_mut(c) = row.iter().skip(k * m).take(m).copied().collect();
    }
    let tape = keep.then_some(Tape { inputs, pre, trig: trigs, last: y });
    Ok((eval, tape))
}

fn accumulate_dense(grad: &mut [f64], d: &Dense, dz: &Array2<f64>, input: &Array2<f64>, m: usize) {
    {
        let mut gw = ArrayViewMut2::from_shape((d.fan_out, d.fan_in), &mut grad[d.weight_range()]).expect("layout");
        general_mat_mul(1.0, dz, &input.t(), 1.0, &mut gw);
    }
    let gb = &mut grad[d.bias_range()];
    for (row, g) in dz.rows().into_iter().zip(gb.iter_mut()) {
        *g += row.iter().take(m).sum::<f64>();
    }
}

fn backprop(w: &[f64], d: &Dense, dz: &Array2<f64>) -> Array2<f64> {
    let mut dh = Array2::zeros((d.fan_in, dz.ncols()));
    general_mat_mul(1.0, &weights_view(w, d).t(), dz, 0.0, &mut dh);
    dh
}

fn backward_chunk(
    arch: &Architecture,
    w: &[f64],
    chunk: &Chunk,
    channels: ChannelSet,
    tape: Tape,
    adjoint: &FieldEval,
    grad: &mut [f64],
) {
    let cfg = &arch.config;
    let m = chunk.len;
    let slots = Slots::new(channels, m);
    let mut gout = Array2::zeros((1, channels.len() * m));
    for (k, c) in channels.iter().enumerate() {
        let a = adjoint.channel(c);
        if a.is_empty() {
            continue;
        }
        for j in 0..m {
            gout[[0, k * m + j]] = cfg.xi * a[j];
        }
    }
    let out = arch.output_layer();
    accumulate_dense(grad, out, &gout, &tape.last, m);
    let mut dy = backprop(w, out, &gout);
    let mut layer = tape.pre.len();
    for b in (0..cfg.n_b).rev() {
        let mut dh = dy.clone();
        for d in arch.block(b).iter().rev() {
            layer -= 1;
            let dz = activate_backward(&tape.pre[layer], tape.trig[layer].as_ref(), &dh, slots, cfg.snake_a);
            accumulate_dense(grad, d, &dz, &tape.inputs[layer], m);
            dh = backprop(w, d, &dz);
        }
        dy += &dh;
    }
    accumulate_dense(grad, arch.input_layer(), &dy, &chunk.features, m);
}

fn check_batch(arch: &Architecture, w: &[f64], batch: &Batch) -> Result<()> {
    if w.len() != arch.n_params() {
        return Err(Error::InvalidArgument(format!(
            "weight vector has {} entries, architecture needs {}",
            w.len(),
            arch.n_params()
        )));
    }
    if batch.feature_dim != arch.config.feature_dim() {
        return Err(Error::InvalidArgument("batch built for a different encoding".into()));
    }
    Ok(())
}

/// Evaluate the requested channels at every batch point.
pub fn evaluate(arch: &Architecture, w: &[f64], batch: &Batch) -> Result<FieldEval> {
    check_batch(arch, w, batch)?;
    let mut all = FieldEval::default();
    for chunk in &batch.chunks {
        let (e, _) = forward_chunk(arch, w, chunk, batch.channels, false)?;
        for c in batch.channels.iter() {
            all.channel_mut(c).extend_from_slice(e.channel(c));
        }
    }
    Ok(all)
}

/// Evaluate and backpropagate. For every chunk `adjoint` receives the
/// chunk's location and field values and returns `∂loss/∂(channel)` per
/// point (empty vectors mean zero). Parameter gradients are added to
/// `grad` in chunk order, so results are bitwise reproducible.
pub fn evaluate_with_gradient<F>(
    arch: &Architecture,
    w: &[f64],
    batch: &Batch,
    mut adjoint: F,
    grad: &mut [f64],
) -> Result<()>
where
    F: FnMut(ChunkView<'_>, &FieldEval) -> Result<FieldEval>,
{
    check_batch(arch, w, batch)?;
    if grad.len() != w.len() {
        return Err(Error::InvalidArgument("gradient length mismatch".into()));
    }
    for chunk in &batch.chunks {
        let (e, tape) = forward_chunk(arch, w, chunk, batch.channels, true)?;
        let r = chunk.start..chunk.start + chunk.len;
        let view = ChunkView { start: chunk.start, x: &batch.x[r.clone()], t: &batch.t[r] };
        let adj = adjoint(view, &e)?;
        backward_chunk(arch, w, chunk, batch.channels, tape.expect("kept"), &adj, grad);
    }
    Ok(())
}

/// Anything that can produce field values and derivatives at points.
pub trait FieldModel {
    fn eval_points(&self, x: &[f64], t: &[f64], channels: ChannelSet) -> Result<FieldEval>;
}

impl FieldModel for NetworkParams {
    fn eval_points(&self, x: &[f64], t: &[f64], channels: ChannelSet) -> Result<FieldEval> {
        let batch = Batch::new(self, x.to_vec(), t.to_vec(), channels, DEFAULT_CHUNK)?;
        evaluate(&self.arch, &self.weights, &batch)
    }
}

/// φ̂ at one point; identical bits to the same point inside any batch.
pub fn forward(params: &NetworkParams, x: f64, t: f64) -> Result<f64> {
    Ok(params.eval_points(&[x], &[t], ChannelSet::VALUE)?.phi[0])
}

#[cfg(test)]
mod tests {
    use super::super::network::{forward_mixed, forward_with_jets, init_params, Axis, NetworkConfig};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> NetworkParams {
        let cfg = NetworkConfig {
            n_f: 16,
            n_b: 2,
            fc_per_block: 2,
            ffe_size: 4,
            ffe_sigma: 1.0,
            xi: 0.3,
            length: 1.0,
            period: 0.004,
            seed: 5,
            ..Default::default()
        };
        init_params(&cfg).unwrap()
    }

    fn points(n: usize, seed: u64, p: &NetworkParams) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = p.config();
        (0..n).map(|_| (rng.gen_range(0.0..c.length), rng.gen_range(0.0..c.period))).unzip()
    }

    #[test]
    fn channel_slots() {
        let s = ChannelSet::new(&[Channel::XT]);
        assert_eq!(s.len(), 4);
        assert_eq!(s.slot(Channel::XT), Some(3));
        assert_eq!(s.slot(Channel::XX), None);
        assert_eq!(ChannelSet::all().slot(Channel::TT), Some(4));
    }

    #[test]
    fn batch_matches_jet_route() {
        let p = small();
        let (x, t) = points(300, 1, &p);
        let e = p.eval_points(&x, &t, ChannelSet::all()).unwrap();
        for i in 0..x.len() {
            let jx = forward_with_jets(&p, x[i], t[i], Axis::X).unwrap();
            let jt = forward_with_jets(&p, x[i], t[i], Axis::T).unwrap();
            let xt = forward_mixed(&p, x[i], t[i]).unwrap();
            let close = |a: f64, b: f64, s: f64| (a - b).abs() <= 1e-10 * s;
            let sv = jx.v.abs().max(1e-3);
            assert!(close(e.phi[i], jx.v, sv));
            assert!(close(e.phi_x[i], jx.d1, jx.d1.abs().max(1e-3)));
            assert!(close(e.phi_xx[i], jx.d2, jx.d2.abs().max(1e-3)));
            assert!(close(e.phi_t[i], jt.d1, jt.d1.abs().max(1.0)));
            assert!(close(e.phi_tt[i], jt.d2, jt.d2.abs().max(1.0)));
            assert!(close(e.phi_xt[i], xt, xt.abs().max(1.0)));
        }
    }

    #[test]
    fn pointwise_equals_batch_bitwise() {
        let p = init_params(&NetworkConfig { seed: 2, ..Default::default() }).unwrap();
        let (x, t) = points(100, 2, &p);
        let e = p.eval_points(&x, &t, ChannelSet::VALUE).unwrap();
        for i in 0..x.len() {
            assert_eq!(forward(&p, x[i], t[i]).unwrap().to_bits(), e.phi[i].to_bits());
        }
    }

    #[test]
    fn jets_match_finite_differences() {
        let cfg = NetworkConfig { n_f: 16, n_b: 2, xi: 0.3, period: 0.004, seed: 5, ..Default::default() };
        let p = init_params(&cfg).unwrap();
        let c = p.config().clone();
        let (x, t) = points(100, 3, &p);
        let (hx, ht) = (1e-4 * c.length, 1e-4 * c.period);
        for i in 0..x.len() {
            let f = |x, t| forward(&p, x, t).unwrap();
            let (xi, ti) = (x[i], t[i]);
            let jx = forward_with_jets(&p, xi, ti, Axis::X).unwrap();
            let jt = forward_with_jets(&p, xi, ti, Axis::T).unwrap();
            // Richardson-extrapolated central differences
            let first = |g: &dyn Fn(f64) -> f64, h: f64| {
                let d = |h: f64| (g(h) - g(-h)) / (2.0 * h);
                (4.0 * d(h) - d(2.0 * h)) / 3.0
            };
            let d1x = first(&|h| f(xi + h, ti), hx);
            let d1t = first(&|h| f(xi, ti + h), ht);
            // second differences at 1e-4 steps drown in round-off
            let second = |g: &dyn Fn(f64) -> f64, h: f64| {
                let d = |h: f64| (g(h) - 2.0 * g(0.0) + g(-h)) / (h * h);
                (4.0 * d(h) - d(2.0 * h)) / 3.0
            };
            let d2x = second(&|h| f(xi + h, ti), 1e-3 * c.length);
            let d2t = second(&|h| f(xi, ti + h), 1e-3 * c.period);
            // floors keep near-zero derivatives from dominating
            let rel = |a: f64, b: f64, floor: f64| (a - b).abs() / a.abs().max(floor);
            assert!(rel(jx.d1, d1x, 0.1) < 1e-6, "{} {}", jx.d1, d1x);
            assert!(rel(jt.d1, d1t, 0.1 / c.period) < 1e-6);
            assert!(rel(jx.d2, d2x, 0.1) < 1e-6, "{} {}", jx.d2, d2x);
            assert!(rel(jt.d2, d2t, 0.1 / c.period.powi(2)) < 1e-6, "{} {}", jt.d2, d2t);
        }
    }

    fn fd_check(channels: ChannelSet, weights: [f64; 6]) {
        let cfg = NetworkConfig {
            n_f: 8,
            n_b: 1,
            ffe_size: 2,
            ffe_sigma: 1.0,
            xi: 0.5,
            period: 0.004,
            seed: 9,
            ..Default::default()
        };
        let p = init_params(&cfg).unwrap();
        let (x, t) = points(40, 4, &p);
        let batch = Batch::new(&p, x, t, channels, 16).unwrap();
        let scale = [1.0, 1.0, 1e-2, 1.0, 1e-4, 1e-2];
        // L = Σ_c w_c Σ_i (s_c f_c,i)^2 / 2
        let loss = |w: &[f64]| {
            let e = evaluate(&p.arch, w, &batch).unwrap();
            channels
                .iter()
                .map(|c| {
                    let k = c as usize;
                    weights[k] * e.channel(c).iter().map(|v| 0.5 * (scale[k] * v).powi(2)).sum::<f64>()
                })
                .sum::<f64>()
        };
        let mut grad = vec![0.0; p.n_trainable()];
        evaluate_with_gradient(
            &p.arch,
            &p.weights,
            &batch,
            |_, e| {
                let mut adj = FieldEval::default();
                for c in channels.iter() {
                    let k = c as usize;
                    *adj.channel_mut(c) = e.channel(c).iter().map(|v| weights[k] * scale[k] * scale[k] * v).collect();
                }
                Ok(adj)
            },
            &mut grad,
        )
        .unwrap();
        let h = 1e-6;
        let gmax = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
        let mut w = p.weights.clone();
        for i in 0..w.len() {
            let w0 = w[i];
            w[i] = w0 + h;
            let lp = loss(&w);
            w[i] = w0 - h;
            let lm = loss(&w);
            w[i] = w0;
            let fd = (lp - lm) / (2.0 * h);
            let err = (fd - grad[i]).abs() / grad[i].abs().max(1e-2 * gmax);
            assert!(err < 1e-4, "param {i}: analytic {} fd {}", grad[i], fd);
        }
    }

    #[test]
    fn gradient_value_channel() {
        fd_check(ChannelSet::VALUE, [1.0; 6]);
    }

    #[test]
    fn gradient_all_channels() {
        fd_check(ChannelSet::all(), [1.0, 0.7, 1.3, 0.4, 0.9, 1.1]);
    }

    #[test]
    fn gradient_second_order_only() {
        fd_check(ChannelSet::all(), [0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        fd_check(ChannelSet::all(), [0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_adjoint_gives_zero_gradient() {
        let p = small();
        let (x, t) = points(10, 5, &p);
        let b = Batch::new(&p, x, t, ChannelSet::all(), 4).unwrap();
        let mut g = vec![0.0; p.n_trainable()];
        evaluate_with_gradient(&p.arch, &p.weights, &b, |_, _| Ok(FieldEval::default()), &mut g).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_linear_in_weight() {
        let p = small();
        let (x, t) = points(20, 6, &p);
        let b = Batch::new(&p, x, t, ChannelSet::new(&[Channel::XX]), 8).unwrap();
        let run = |lambda: f64| {
            let mut g = vec![0.0; p.n_trainable()];
            evaluate_with_gradient(
                &p.arch,
                &p.weights,
                &b,
                |_, e| Ok(FieldEval { phi_xx: e.phi_xx.iter().map(|v| lambda * v).collect(), ..Default::default() }),
                &mut g,
            )
            .unwrap();
            g
        };
        let (g1, g2) = (run(1.0), run(2.0));
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn chunking_does_not_change_values() {
        let p = small();
        let (x, t) = points(50, 7, &p);
        let a = evaluate(&p.arch, &p.weights, &Batch::new(&p, x.clone(), t.clone(), ChannelSet::all(), 7).unwrap())
            .unwrap();
        let b = evaluate(&p.arch, &p.weights, &Batch::new(&p, x, t, ChannelSet::all(), 64).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pressure_t_chains_through_jets() {
        let p = small();
        let (x, t) = (1.0, 0.0013);
        let e = p.eval_points(&[x], &[t], ChannelSet::all()).unwrap();
        let jt = forward_with_jets(&p, x, t, Axis::T).unwrap();
        let (r, a, rho) = (1.0e4, 1.2566e-3, 1.2);
        let want = r * a * jt.d1 + rho * jt.d2;
        assert!((e.pressure_t(0, r, a, rho) - want).abs() <= 1e-10 * want.abs().max(1.0));
    }
}
