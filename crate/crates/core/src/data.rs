//! Synthetic cross-view sequences.
//!
//! Each identity owns a base appearance vector and a few sinusoidal motion
//! components along a motion basis shared by the whole dataset. A view
//! applies a fixed affine map and additive noise, so frame `t` of identity
//! `i` under view `v` is
//!
//! ```text
//! x = A_v (base_i + Σ_k amp_k sin(freq_k t + phase_k) u_k) + b_v + noise_v ε
//! ```

use std::f64::consts::TAU;
use std::path::Path;

use nalgebra::DMatrix;

use crate::codec::{decode, Reader, Writer};
use crate::error::{Error, Result};
use crate::numerics::{mix_seed, Rng, Tensor};
use crate::vrnn::{FrameSequence, View};

pub const DATASET_MAGIC: &[u8; 4] = b"VADS";
pub const DATASET_VERSION: u8 = 1;
pub const MOTION_COMPONENTS: usize = 3;
pub const MAX_CONDITION: f64 = 100.0;

const SALT_BASIS: u64 = 1;
const SALT_PROBE_VIEW: u64 = 2;
const SALT_GALLERY_VIEW: u64 = 3;
const SALT_IDENTITY: u64 = 4;
const SALT_NOISE: u64 = 5;
const SALT_SPLIT: u64 = 6;

/// The probe and gallery sequence of one identity.
#[derive(Clone, Debug, PartialEq)]
pub struct SequencePair {
    pub probe: FrameSequence,
    pub gallery: FrameSequence,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerationParams {
    pub identities: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub frame_dim: usize,
    /// Strength of the view transforms; 0 makes both views the identity map.
    pub view_gap: f64,
    pub noise_std: f64,
    /// Identity ids are `first_id..first_id + identities`. Datasets that share
    /// a seed share their views, so disjoint id ranges give held-out people
    /// seen through the same cameras.
    pub first_id: u64,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            identities: 32,
            min_len: 8,
            max_len: 32,
            frame_dim: 32,
            view_gap: 0.5,
            noise_std: 0.3,
            first_id: 0,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<()> {
        if self.identities < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 identities, got {}",
                self.identities
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::InvalidConfig(format!(
                "invalid length range [{}, {}]",
                self.min_len, self.max_len
            )));
        }
        if self.frame_dim == 0 {
            return Err(Error::InvalidConfig("frame_dim must be positive".into()));
        }
        if !(self.view_gap >= 0.0) || !(self.noise_std >= 0.0) {
            return Err(Error::InvalidConfig(
                "view_gap and noise_std must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentitySpec {
    pub id: u64,
    pub base: Vec<f64>,
    pub frequencies: Vec<f64>,
    pub phases: Vec<f64>,
    pub amplitudes: Vec<f64>,
}

impl IdentitySpec {
    fn generate(seed: u64, id: u64, dim: usize) -> Self {
        let mut rng = Rng::derive(mix_seed(seed, SALT_IDENTITY), id);
        let base = (0..dim).map(|_| rng.normal()).collect();
        let k = MOTION_COMPONENTS;
        let frequencies = (0..k).map(|_| rng.uniform(0.2, 1.2)).collect();
        let phases = (0..k).map(|_| rng.uniform(0.0, TAU)).collect();
        let amplitudes = (0..k).map(|_| rng.uniform(0.2, 1.0)).collect();
        Self {
            id,
            base,
            frequencies,
            phases,
            amplitudes,
        }
    }

    /// View-independent latent frame at time `t`.
    pub fn latent_frame(&self, basis: &[Vec<f64>], t: usize) -> Vec<f64> {
        let mut s = self.base.clone();
        for k in 0..self.amplitudes.len() {
            let c = self.amplitudes[k] * (self.frequencies[k] * t as f64 + self.phases[k]).sin();
            for (v, u) in s.iter_mut().zip(&basis[k]) {
                *v += c * u;
            }
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewTransform {
    pub matrix: Tensor,
    pub offset: Vec<f64>,
    pub noise_std: f64,
}

impl ViewTransform {
    pub fn identity(dim: usize, noise_std: f64) -> Self {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
        Self {
            matrix: Tensor::from_vec(&[dim, dim], data).expect("square"),
            offset: vec![0.0; dim],
            noise_std,
        }
    }

    /// Rotation `(I − gK)⁻¹(I + gK)` for a random skew-symmetric `K`, times
    /// a diagonal scale `exp(g·s_j)` with `s_j ∈ [−½, ½]`, plus an offset.
    fn generate(dim: usize, gap: f64, noise_std: f64, rng: &mut Rng) -> Result<Self> {
        let scale = 1.0 / (dim as f64).sqrt();
        let mut k = DMatrix::<f64>::zeros(dim, dim);
        for i in 0..dim {
            for j in i + 1..dim {
                let v = scale * rng.normal();
                k[(i, j)] = v;
                k[(j, i)] = -v;
            }
        }
        let eye = DMatrix::<f64>::identity(dim, dim);
        let rot = (&eye - &k * gap)
            .try_inverse()
            .ok_or_else(|| Error::InvalidConfig("singular view rotation".into()))?
            * (&eye + &k * gap);
        let stretch = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(dim, |_, _| {
            (gap * rng.uniform(-0.5, 0.5)).exp()
        }));
        let a = rot * stretch;
        let cond = condition_number(&a);
        if !(cond <= MAX_CONDITION) {
            return Err(Error::InvalidConfig(format!(
                "view gap {gap} gives condition number {cond:.1} > {MAX_CONDITION}"
            )));
        }
        let offset = (0..dim).map(|_| gap * 0.5 * rng.normal()).collect();
        let data = (0..dim)
            .flat_map(|i| (0..dim).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)])
            .collect();
        Ok(Self {
            matrix: Tensor::from_vec(&[dim, dim], data)?,
            offset,
            noise_std,
        })
    }

    /// `A s + b` before noise.
    pub fn apply(&self, s: &[f64]) -> Vec<f64> {
        let mut out = self.offset.clone();
        crate::numerics::matvec_acc(&self.matrix, s, &mut out);
        out
    }

    pub fn condition_number(&self) -> f64 {
        let d = self.matrix.rows();
        condition_number(&DMatrix::from_row_slice(d, d, self.matrix.data()))
    }
}

fn condition_number(a: &DMatrix<f64>) -> f64 {
    let sv = a.singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    max / min
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossViewDataset {
    pub seed: u64,
    pub params: GenerationParams,
    /// `MOTION_COMPONENTS` unit vectors of length `frame_dim`.
    pub motion_basis: Vec<Vec<f64>>,
    pub probe_transform: ViewTransform,
    pub gallery_transform: ViewTransform,
    pub identities: Vec<IdentitySpec>,
    pub probe: Vec<FrameSequence>,
    pub gallery: Vec<FrameSequence>,
}

impl CrossViewDataset {
    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn frame_dim(&self) -> usize {
        self.params.frame_dim
    }

    pub fn pair(&self, i: usize) -> SequencePair {
        SequencePair {
            probe: self.probe[i].clone(),
            gallery: self.gallery[i].clone(),
            label: i,
        }
    }

    pub fn pairs(&self) -> Vec<SequencePair> {
        (0..self.len()).map(|i| self.pair(i)).collect()
    }

    pub fn transform(&self, view: View) -> &ViewTransform {
        match view {
            View::Probe => &self.probe_transform,
            View::Gallery => &self.gallery_transform,
        }
    }
}

fn render(
    spec: &IdentitySpec,
    basis: &[Vec<f64>],
    transform: &ViewTransform,
    len: usize,
    label: usize,
    view: View,
    rng: &mut Rng,
) -> FrameSequence {
    let frames = (0..len)
        .map(|t| {
            let mut x = transform.apply(&spec.latent_frame(basis, t));
            if transform.noise_std > 0.0 {
                for v in &mut x {
                    *v += transform.noise_std * rng.normal();
                }
            }
            x
        })
        .collect();
    FrameSequence {
        frames,
        label,
        view,
    }
}

/// Builds a dataset that is a pure function of `(params, seed)`.
pub fn generate_dataset(params: &GenerationParams, seed: u64) -> Result<CrossViewDataset> {
    params.validate()?;
    let d = params.frame_dim;
    let mut basis_rng = Rng::derive(seed, SALT_BASIS);
    let motion_basis: Vec<Vec<f64>> = (0..MOTION_COMPONENTS)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| basis_rng.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    let probe_transform = ViewTransform::generate(
        d,
        params.view_gap,
        params.noise_std,
        &mut Rng::derive(seed, SALT_PROBE_VIEW),
    )?;
    let gallery_transform = ViewTransform::generate(
        d,
        params.view_gap,
        params.noise_std,
        &mut Rng::derive(seed, SALT_GALLERY_VIEW),
    )?;
    let mut identities = Vec::with_capacity(params.identities);
    let mut probe = Vec::with_capacity(params.identities);
    let mut gallery = Vec::with_capacity(params.identities);
    for label in 0..params.identities {
        let id = params.first_id + label as u64;
        let spec = IdentitySpec::generate(seed, id, d);
        let mut rng = Rng::derive(mix_seed(seed, SALT_NOISE), id);
        let len_p = rng.int_inclusive(params.min_len, params.max_len);
        let len_g = rng.int_inclusive(params.min_len, params.max_len);
        probe.push(render(
            &spec,
            &motion_basis,
            &probe_transform,
            len_p,
            label,
            View::Probe,
            &mut rng,
        ));
        gallery.push(render(
            &spec,
            &motion_basis,
            &gallery_transform,
            len_g,
            label,
            View::Gallery,
            &mut rng,
        ));
        identities.push(spec);
    }
    Ok(CrossViewDataset {
        seed,
        params: *params,
        motion_basis,
        probe_transform,
        gallery_transform,
        identities,
        probe,
        gallery,
    })
}

/// `count` new identities following `ds`'s, recorded by the same cameras.
pub fn held_out(ds: &CrossViewDataset, count: usize) -> Result<CrossViewDataset> {
    let params = GenerationParams {
        identities: count,
        first_id: ds.params.first_id + ds.len() as u64,
        ..ds.params
    };
    generate_dataset(&params, ds.seed)
}

/// Splits identities into `⌈fraction·L⌉` training pairs and the rest.
pub fn split_train_val(
    dataset: &CrossViewDataset,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<SequencePair>, Vec<SequencePair>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "split fraction {fraction} outside (0, 1)"
        )));
    }
    if dataset.len() < 2 {
        return Err(Error::InvalidConfig(
            "need at least 2 identities to split".into(),
        ));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    Rng::derive(seed, SALT_SPLIT).shuffle(&mut order);
    let n_train = (fraction * dataset.len() as f64).ceil() as usize;
    let (train, val) = order.split_at(n_train);
    Ok((
        train.iter().map(|&i| dataset.pair(i)).collect(),
        val.iter().map(|&i| dataset.pair(i)).collect(),
    ))
}

fn write_transform(w: &mut Writer, t: &ViewTransform) {
    w.f64s(t.matrix.data());
    w.f64s(&t.offset);
    w.f64(t.noise_std);
}

fn read_transform(r: &mut Reader<'_>, d: usize) -> Result<ViewTransform> {
    Ok(ViewTransform {
        matrix: Tensor::from_vec(&[d, d], r.f64s(d * d)?)?,
        offset: r.f64s(d)?,
        noise_std: r.f64()?,
    })
}

fn write_sequence(w: &mut Writer, s: &FrameSequence) {
    w.len(s.label);
    w.len(s.frames.len());
    for f in &s.frames {
        w.f64s(f);
    }
}

fn read_sequence(r: &mut Reader<'_>, d: usize, view: View) -> Result<FrameSequence> {
    let label = r.len()?;
    let len = r.len()?;
    let frames = (0..len).map(|_| r.f64s(d)).collect::<Result<Vec<_>>>()?;
    FrameSequence::new(frames, label, view)
}

pub fn encode_dataset(ds: &CrossViewDataset) -> Vec<u8> {
    let p = &ds.params;
    let mut w = Writer::new();
    w.u64(ds.seed);
    w.u64(p.first_id);
    w.len(p.identities);
    w.len(p.frame_dim);
    w.len(p.min_len);
    w.len(p.max_len);
    w.f64(p.view_gap);
    w.f64(p.noise_std);
    w.len(ds.motion_basis.len());
    for u in &ds.motion_basis {
        w.f64s(u);
    }
    write_transform(&mut w, &ds.probe_transform);
    write_transform(&mut w, &ds.gallery_transform);
    for spec in &ds.identities {
        w.u64(spec.id);
        w.f64s(&spec.base);
        w.vec(&spec.frequencies);
        w.vec(&spec.phases);
        w.vec(&spec.amplitudes);
    }
    for (p, g) in ds.probe.iter().zip(&ds.gallery) {
        write_sequence(&mut w, p);
        write_sequence(&mut w, g);
    }
    w.finish(DATASET_MAGIC, DATASET_VERSION)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<CrossViewDataset> {
    decode(bytes, DATASET_MAGIC, DATASET_VERSION, |r| {
        let seed = r.u64()?;
        let first_id = r.u64()?;
        let identities = r.len()?;
        let frame_dim = r.len()?;
        let params = GenerationParams {
            identities,
            frame_dim,
            min_len: r.len()?,
            max_len: r.len()?,
            view_gap: r.f64()?,
            noise_std: r.f64()?,
            first_id,
        };
        let d = frame_dim;
        let k = r.len()?;
        let motion_basis = (0..k).map(|_| r.f64s(d)).collect::<Result<Vec<_>>>()?;
        let probe_transform = read_transform(r, d)?;
        let gallery_transform = read_transform(r, d)?;
        let specs = (0..identities)
            .map(|_| {
                Ok(IdentitySpec {
                    id: r.u64()?,
                    base: r.f64s(d)?,
                    frequencies: r.vec()?,
                    phases: r.vec()?,
                    amplitudes: r.vec()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut probe = Vec::with_capacity(identities);
        let mut gallery = Vec::with_capacity(identities);
        for _ in 0..identities {
            probe.push(read_sequence(r, d, View::Probe)?);
            gallery.push(read_sequence(r, d, View::Gallery)?);
        }
        Ok(CrossViewDataset {
            seed,
            params,
            motion_basis,
            probe_transform,
            gallery_transform,
            identities: specs,
            probe,
            gallery,
        })
    })
}

pub fn save_dataset(ds: &CrossViewDataset, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_dataset(ds))?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<CrossViewDataset> {
    decode_dataset(&std::fs::read(path)?)
}
