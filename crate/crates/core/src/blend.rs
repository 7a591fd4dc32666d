//! PatchBlender: a learnable `n×n` ratio matrix mixing patch embeddings
//! along the temporal axis.
//!
//! For a latent clip `X` of shape `n×p×z`, output frame `i` is
//! `Σ_j R[i][j] · X_j`. The ratios are unconstrained and start at the
//! identity, so a fresh layer is an exact no-op. Two ablation variants
//! replace the source patch with a randomly drawn location.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Backward, BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlendVariant {
    /// Patch `q` of every frame blends with patch `q` of the other frames.
    #[default]
    SameLocation,
    /// Patch `q` reads source frame `j` at an independently drawn location `π(q, j)`.
    RandomPerFrame,
    /// Patch `q` reads every source frame at one drawn location `ℓ(q)`.
    SameRandomLocation,
}

impl BlendVariant {
    pub const ALL: [BlendVariant; 3] = [
        BlendVariant::SameLocation,
        BlendVariant::RandomPerFrame,
        BlendVariant::SameRandomLocation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BlendVariant::SameLocation => "same-location",
            BlendVariant::RandomPerFrame => "random-per-frame",
            BlendVariant::SameRandomLocation => "same-random-location",
        }
    }
}

/// Source-patch lookup for the random variants, frozen at construction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PermutationMap {
    /// `table[j * patches + q]` is the patch read from frame `j` for target patch `q`.
    PerFrame {
        frames: usize,
        patches: usize,
        table: Vec<u32>,
    },
    /// `table[q]` is the patch read from every frame for target patch `q`.
    Shared { patches: usize, table: Vec<u32> },
}

impl PermutationMap {
    pub fn patches(&self) -> usize {
        match self {
            PermutationMap::PerFrame { patches, .. } | PermutationMap::Shared { patches, .. } => *patches,
        }
    }

    pub fn table(&self) -> &[u32] {
        match self {
            PermutationMap::PerFrame { table, .. } | PermutationMap::Shared { table, .. } => table,
        }
    }

    /// Source patch in frame `j` for target patch `q`.
    #[inline]
    pub fn source(&self, j: usize, q: usize) -> usize {
        match self {
            PermutationMap::PerFrame { patches, table, .. } => table[j * patches + q] as usize,
            PermutationMap::Shared { table, .. } => table[q] as usize,
        }
    }

    fn validate(&self, frames: usize, variant: BlendVariant) -> Result<()> {
        let (expected_len, matches_variant) = match self {
            PermutationMap::PerFrame { frames: f, patches, .. } => {
                (f * patches, variant == BlendVariant::RandomPerFrame && *f == frames)
            }
            PermutationMap::Shared { patches, .. } => (*patches, variant == BlendVariant::SameRandomLocation),
        };
        if !matches_variant || self.table().len() != expected_len {
            return Err(Error::Construction(format!(
                "permutation map does not fit variant {} with {frames} frames",
                variant.as_str()
            )));
        }
        let p = self.patches();
        if let Some(bad) = self.table().iter().find(|&&s| s as usize >= p) {
            return Err(Error::Construction(format!("patch index {bad} out of range [0, {p})")));
        }
        Ok(())
    }
}

/// Draws the frozen source-location table for a random variant.
pub fn draw_permutations(frames: usize, patches: usize, variant: BlendVariant, seed: u64) -> Result<PermutationMap> {
    if frames == 0 || patches == 0 {
        return Err(Error::Construction("frames and patches must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |len: usize| -> Vec<u32> { (0..len).map(|_| rng.gen_range(0..patches as u32)).collect() };
    match variant {
        BlendVariant::SameLocation => Err(Error::Contract(
            "same-location blending has no permutation map".into(),
        )),
        BlendVariant::RandomPerFrame => Ok(PermutationMap::PerFrame {
            frames,
            patches,
            table: draw(frames * patches),
        }),
        BlendVariant::SameRandomLocation => Ok(PermutationMap::Shared {
            patches,
            table: draw(patches),
        }),
    }
}

/// The learnable ratios of one PatchBlender layer plus its variant metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendMatrix {
    ratios: Tensor,
    variant: BlendVariant,
    map: Option<PermutationMap>,
    seed: u64,
}

impl BlendMatrix {
    /// Same-location blending with identity ratios.
    pub fn identity(frames: usize) -> Result<Self> {
        if frames < 1 {
            return Err(Error::Construction("a blend matrix needs at least one frame".into()));
        }
        Ok(Self {
            ratios: Tensor::eye(frames).with_requires_grad(true),
            variant: BlendVariant::SameLocation,
            map: None,
            seed: 0,
        })
    }

    /// Identity ratios for any variant; random variants draw their map from `seed`.
    pub fn new(frames: usize, patches: usize, variant: BlendVariant, seed: u64) -> Result<Self> {
        let mut m = Self::identity(frames)?;
        if patches == 0 {
            return Err(Error::Construction("patches must be positive".into()));
        }
        m.variant = variant;
        m.seed = seed;
        if variant != BlendVariant::SameLocation {
            m.map = Some(draw_permutations(frames, patches, variant, seed)?);
        }
        Ok(m)
    }

    /// Reassembles a matrix from stored parts, validating every invariant.
    pub fn from_parts(ratios: Tensor, variant: BlendVariant, map: Option<PermutationMap>, seed: u64) -> Result<Self> {
        let n = ratios.shape().first().copied().unwrap_or(0);
        if ratios.shape() != [n, n] {
            return Err(Error::Construction(format!(
                "blend ratios must be square, got {:?}",
                ratios.shape()
            )));
        }
        match (&map, variant) {
            (None, BlendVariant::SameLocation) => {}
            (Some(m), v) if v != BlendVariant::SameLocation => m.validate(n, v)?,
            _ => {
                return Err(Error::Construction(format!(
                    "variant {} and permutation map disagree",
                    variant.as_str()
                )))
            }
        }
        Ok(Self {
            ratios: ratios.with_requires_grad(true),
            variant,
            map,
            seed,
        })
    }

    pub fn frames(&self) -> usize {
        self.ratios.shape()[0]
    }

    pub fn ratios(&self) -> &Tensor {
        &self.ratios
    }

    pub fn ratios_mut(&mut self) -> &mut Tensor {
        &mut self.ratios
    }

    pub fn variant(&self) -> BlendVariant {
        self.variant
    }

    pub fn permutation_map(&self) -> Option<&PermutationMap> {
        self.map.as_ref()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Frobenius distance `‖R − I‖_F`.
    pub fn identity_distance(&self) -> f64 {
        identity_distance(&self.ratios)
    }

    /// Blends a single latent clip outside any tape.
    pub fn apply(&self, clip: &LatentClip) -> Result<LatentClip> {
        let s = clip.frames.shape();
        let (n, p, z) = (s[0], s[1], s[2]);
        check_blend_shapes(self.frames(), n, p, self.map.as_ref())?;
        let out = blend_forward(self.ratios.data(), n, self.map.as_ref(), clip.frames.data(), 1, 0, p, z);
        LatentClip::new(Tensor::new([n, p, z], out)?)
    }

    /// Records the blend of `x` (`[n,p,z]` or `[b,n,p,z]`) on a tape, with `ratios`
    /// the tape variable holding this matrix's ratios.
    pub fn blend(&self, tape: &mut Tape, ratios: Var, x: Var) -> Result<Var> {
        blend(tape, ratios, x, self.map.as_ref())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, ratios_to_csv(&self.ratios))?;
        Ok(())
    }

    pub fn write_heatmap(&self, path: &Path) -> Result<()> {
        fs::write(path, heatmap_pgm(&self.ratios))?;
        Ok(())
    }
}

pub fn identity_distance(ratios: &Tensor) -> f64 {
    let n = ratios.shape()[0];
    ratios
        .data()
        .iter()
        .enumerate()
        .map(|(k, &r)| {
            let d = if k / n == k % n { r - 1.0 } else { r };
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// The `n×p×z` latent patch block of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentClip {
    frames: Tensor,
}

impl LatentClip {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.rank() != 3 {
            return Err(Error::dim("latent clip", frames.shape(), &[0, 0, 0]));
        }
        Ok(Self { frames })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.frames
    }

    pub fn into_tensor(self) -> Tensor {
        self.frames
    }
}

fn check_blend_shapes(n_ratio: usize, n: usize, p: usize, map: Option<&PermutationMap>) -> Result<()> {
    if n != n_ratio {
        return Err(Error::dim("blend", &[n_ratio, n_ratio], &[n]));
    }
    if let Some(m) = map {
        if m.patches() != p {
            return Err(Error::dim("blend", &[m.patches()], &[p]));
        }
    }
    Ok(())
}

/// `out[b,i,q,:] = Σ_j R[i][j] · x[b,j,src(j,q),:]`.
///
/// Each batch item may start with `lead` extra tokens (e.g. a class token)
/// that are copied through unchanged. Zero ratios are skipped and the first
/// nonzero term initializes the sum, so identity ratios reproduce the input
/// bit for bit.
#[allow(clippy::too_many_arguments)]
pub(crate) fn blend_forward(
    r: &[f64],
    n: usize,
    map: Option<&PermutationMap>,
    x: &[f64],
    batch: usize,
    lead: usize,
    p: usize,
    z: usize,
) -> Vec<f64> {
    let frame = p * z;
    let item = lead * z + n * frame;
    let mut out = vec![0.0; batch * item];
    for b in 0..batch {
        let (xl, xb) = x[b * item..(b + 1) * item].split_at(lead * z);
        let (ol, ob) = out[b * item..(b + 1) * item].split_at_mut(lead * z);
        ol.copy_from_slice(xl);
        for i in 0..n {
            let o = &mut ob[i * frame..(i + 1) * frame];
            let mut first = true;
            for j in 0..n {
                let w = r[i * n + j];
                if w == 0.0 {
                    continue;
                }
                let xj = &xb[j * frame..(j + 1) * frame];
                match map {
                    None => axpy_block(o, w, xj, first),
                    Some(m) => {
                        for q in 0..p {
                            let s = m.source(j, q);
                            axpy_block(&mut o[q * z..(q + 1) * z], w, &xj[s * z..(s + 1) * z], first);
                        }
                    }
                }
                first = false;
            }
        }
    }
    out
}

#[inline]
fn axpy_block(out: &mut [f64], w: f64, x: &[f64], assign: bool) {
    if assign {
        out.iter_mut().zip(x).for_each(|(o, v)| *o = w * v);
    } else {
        out.iter_mut().zip(x).for_each(|(o, v)| *o += w * v);
    }
}

struct BlendRule {
    n: usize,
    batch: usize,
    lead: usize,
    p: usize,
    z: usize,
    map: Option<PermutationMap>,
    fault: bool,
}

impl Backward for BlendRule {
    fn name(&self) -> &'static str {
        "blend"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grads: &mut [Option<Vec<f64>>]) {
        let (n, p, z) = (self.n, self.p, self.z);
        let frame = p * z;
        let (lz, item) = (self.lead * z, self.lead * z + n * frame);
        // start of frame `f` of batch item `b`
        let at = |b: usize, f: usize| b * item + lz + f * frame;
        let (r, x, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
        let src = |j: usize, q: usize| self.map.as_ref().map_or(q, |m| m.source(j, q));
        if let Some(gr) = grads[0].as_mut() {
            for b in 0..self.batch {
                for i in 0..n {
                    let gi = &g[at(b, i)..at(b, i) + frame];
                    for j in 0..n {
                        let xj = &x[at(b, j)..at(b, j) + frame];
                        let mut acc = 0.0;
                        for q in 0..p {
                            let s = src(j, q);
                            let (gq, xs) = (&gi[q * z..(q + 1) * z], &xj[s * z..(s + 1) * z]);
                            acc += gq.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                        }
                        gr[i * n + j] += if self.fault { 1.5 * acc } else { acc };
                    }
                }
            }
        }
        if let Some(gx) = grads[1].as_mut() {
            for b in 0..self.batch {
                let lead = b * item..b * item + lz;
                gx[lead.clone()].iter_mut().zip(&g[lead]).for_each(|(d, v)| *d += v);
                for j in 0..n {
                    let gxj = &mut gx[at(b, j)..at(b, j) + frame];
                    for i in 0..n {
                        let w = r[i * n + j];
                        if w == 0.0 {
                            continue;
                        }
                        let gi = &g[at(b, i)..at(b, i) + frame];
                        for q in 0..p {
                            let s = src(j, q);
                            let dst = &mut gxj[s * z..(s + 1) * z];
                            dst.iter_mut().zip(&gi[q * z..(q + 1) * z]).for_each(|(d, v)| *d += w * v);
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy)]
enum Layout {
    /// `[n,p,z]` or `[b,n,p,z]`.
    Frames,
    /// `[b, 1 + n·p, z]` with a leading class token.
    Tokens { frames: usize },
}

fn blend_impl(tape: &mut Tape, ratios: Var, x: Var, map: Option<&PermutationMap>, layout: Layout, fault: bool) -> Result<Var> {
    let rs = tape.shape(ratios).to_vec();
    let xs = tape.shape(x).to_vec();
    let (batch, lead, n, p, z) = match (layout, xs.as_slice()) {
        (Layout::Frames, &[n, p, z]) => (1, 0, n, p, z),
        (Layout::Frames, &[b, n, p, z]) => (b, 0, n, p, z),
        (Layout::Tokens { frames }, &[b, t, z]) if frames > 0 && t > 1 && (t - 1) % frames == 0 => {
            (b, 1, frames, (t - 1) / frames, z)
        }
        _ => return Err(Error::dim("blend", &rs, &xs)),
    };
    if rs.len() != 2 || rs[0] != rs[1] {
        return Err(Error::dim("blend", &rs, &xs));
    }
    check_blend_shapes(rs[0], n, p, map)?;
    let out = blend_forward(tape.value(ratios).data(), n, map, tape.value(x).data(), batch, lead, p, z);
    let value = Tensor::new(xs, out)?;
    let rule = BlendRule {
        n,
        batch,
        lead,
        p,
        z,
        map: map.cloned(),
        fault,
    };
    Ok(tape.record(value, &[ratios, x], Box::new(rule)))
}

/// Records `b(X) = R·X` along the frame axis of `x` (`[n,p,z]` or `[b,n,p,z]`).
pub fn blend(tape: &mut Tape, ratios: Var, x: Var, map: Option<&PermutationMap>) -> Result<Var> {
    blend_impl(tape, ratios, x, map, Layout::Frames, false)
}

/// Blends the patch tokens of a `[b, 1 + n·p, z]` sequence whose first token
/// is a class token; the class token passes through untouched.
pub fn blend_tokens(tape: &mut Tape, ratios: Var, tokens: Var, frames: usize, map: Option<&PermutationMap>) -> Result<Var> {
    blend_impl(tape, ratios, tokens, map, Layout::Tokens { frames }, false)
}

/// Same forward as [`blend_tokens`] with a deliberately wrong ratio gradient,
/// used as a negative control for gradient checking.
#[doc(hidden)]
pub fn blend_tokens_with_faulty_grad(
    tape: &mut Tape,
    ratios: Var,
    tokens: Var,
    frames: usize,
    map: Option<&PermutationMap>,
) -> Result<Var> {
    blend_impl(tape, ratios, tokens, map, Layout::Tokens { frames }, true)
}

/// One row per line, values comma-separated in shortest round-trip form.
pub fn ratios_to_csv(ratios: &Tensor) -> String {
    let n = ratios.shape()[1];
    let mut s = String::new();
    for (i, row) in ratios.data().chunks(n).enumerate() {
        if i > 0 {
            s.push('\n');
        }
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                s.push(',');
            }
            write!(s, "{v}").unwrap();
        }
    }
    s
}

pub fn ratios_from_csv(text: &str) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Format(format!("bad ratio {v:?}: {e}")))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(Error::Format("ratio CSV must hold a square matrix".into()));
    }
    Tensor::new([n, n], rows.concat())
}

pub fn read_ratios_csv(path: &Path) -> Result<Tensor> {
    ratios_from_csv(&fs::read_to_string(path)?)
}

/// 8-bit binary graymap (P5), one pixel per ratio, min-max normalized.
/// A constant matrix maps to mid-gray 128.
pub fn heatmap_pgm(ratios: &Tensor) -> Vec<u8> {
    let (rows, cols) = (ratios.shape()[0], ratios.shape()[1]);
    let d = ratios.data();
    let min = d.iter().copied().fold(f64::INFINITY, f64::min);
    let max = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(d.iter().map(|&v| {
        if max > min {
            (255.0 * (v - min) / (max - min)).round() as u8
        } else {
            128
        }
    }));
    out
}
