//! Toy vision transformer: patch embedding, class token, learned positions,
//! pre-norm blocks, class-token pooling with a final layer norm.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, MovError, Result};
use crate::numcore::nn::{EncoderBlock, LayerNorm, Linear};
use crate::numcore::params::init;
use crate::numcore::{Graph, ParamSet, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VitConfig {
    /// `(height, width)` of the native input.
    pub image_hw: (usize, usize),
    pub in_channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            image_hw: (32, 32),
            in_channels: 3,
            patch_size: 8,
            embed_dim: 64,
            layers: 4,
            heads: 4,
            mlp_ratio: 2,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_hw;
        if self.patch_size == 0 || h == 0 || w == 0 || h % self.patch_size != 0 || w % self.patch_size != 0 {
            return Err(MovError::config(format!(
                "image {h}x{w} not divisible by patch size {}",
                self.patch_size
            )));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(MovError::config(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.in_channels == 0 || self.mlp_ratio == 0 {
            return Err(MovError::config("channels and mlp ratio must be positive"));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_hw.0 / self.patch_size, self.image_hw.1 / self.patch_size)
    }

    pub fn num_patches(&self) -> usize {
        let (a, b) = self.grid();
        a * b
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }
}

/// Splits a `C x H x W` image into `(H/ps)(W/ps)` flattened patches,
/// row-major over the grid, each laid out channel-major.
pub fn patchify(image: &Tensor, patch_size: usize) -> Result<Tensor> {
    ensure_arg!(image.rank() == 3, "patchify expects C x H x W, got {:?}", image.shape());
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(MovError::config(format!(
            "image {h}x{w} not divisible by patch size {patch_size}"
        )));
    }
    let (gh, gw) = (h / patch_size, w / patch_size);
    let pd = c * patch_size * patch_size;
    let src = image.data();
    let mut out = Vec::with_capacity(gh * gw * pd);
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for y in 0..patch_size {
                    let row = (ch * h + py * patch_size + y) * w + px * patch_size;
                    out.extend_from_slice(&src[row..row + patch_size]);
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, pd], out)
}

/// Bilinear resampling weights (corner-aligned) from `n_in` to `n_out` points.
fn linear_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    (0..n_out)
        .map(|i| {
            if n_in == 1 || n_out == 1 {
                let pos = if n_out == 1 { (n_in - 1) as f64 / 2.0 } else { 0.0 };
                let j = pos.floor() as usize;
                let f = pos - j as f64;
                return if f == 0.0 { vec![(j, 1.0)] } else { vec![(j, 1.0 - f), (j + 1, f)] };
            }
            let pos = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
            let j = (pos.floor() as usize).min(n_in - 2);
            let f = pos - j as f64;
            vec![(j, 1.0 - f), (j + 1, f)]
        })
        .collect()
}

/// Matrix `M` with `M · pe` = interpolated table: row 0 (class token) copied,
/// spatial rows bilinearly resized from grid `from` to grid `to`.
pub fn pos_interpolation_matrix(from: (usize, usize), to: (usize, usize)) -> Result<Tensor> {
    ensure_arg!(to.0 > 0 && to.1 > 0, "zero-size positional grid {to:?}");
    ensure_arg!(from.0 > 0 && from.1 > 0, "zero-size positional grid {from:?}");
    let n_in = from.0 * from.1 + 1;
    let n_out = to.0 * to.1 + 1;
    let mut m = Tensor::zeros(&[n_out, n_in]);
    m.row_mut(0)[0] = 1.0;
    if from == to {
        for i in 1..n_out {
            m.row_mut(i)[i] = 1.0;
        }
        return Ok(m);
    }
    let wy = linear_weights(from.0, to.0);
    let wx = linear_weights(from.1, to.1);
    for y in 0..to.0 {
        for x in 0..to.1 {
            let row = m.row_mut(1 + y * to.1 + x);
            for &(sy, ay) in &wy[y] {
                for &(sx, ax) in &wx[x] {
                    row[1 + sy * from.1 + sx] += ay * ax;
                }
            }
        }
    }
    Ok(m)
}

/// Positional table for a new grid; the class-token row is copied bitwise.
pub fn interpolate_pos_encoding(
    pe: &Tensor,
    from: (usize, usize),
    to: (usize, usize),
) -> Result<Tensor> {
    let (rows, _) = pe.expect_matrix("positional table")?;
    ensure_arg!(
        rows == from.0 * from.1 + 1,
        "table has {rows} rows, grid {from:?} needs {}",
        from.0 * from.1 + 1
    );
    if from == to {
        return Ok(pe.clone());
    }
    let mut out = pos_interpolation_matrix(from, to)?.matmul(pe)?;
    out.row_mut(0).copy_from_slice(pe.row(0));
    Ok(out)
}

/// A ViT whose weights live under `prefix` in a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Vit {
    pub prefix: String,
    pub cfg: VitConfig,
    pub patch: Linear,
    pub blocks: Vec<EncoderBlock>,
    pub ln_post: LayerNorm,
}

impl Vit {
    pub fn new(prefix: impl Into<String>, cfg: VitConfig) -> Result<Self> {
        cfg.validate()?;
        let prefix = prefix.into();
        let d = cfg.embed_dim;
        let blocks = (0..cfg.layers)
            .map(|i| EncoderBlock::new(format!("{prefix}.block{i}"), d, cfg.heads, d * cfg.mlp_ratio))
            .collect::<Result<_>>()?;
        Ok(Self {
            patch: Linear::new(format!("{prefix}.patch"), cfg.patch_dim(), d),
            ln_post: LayerNorm::new(format!("{prefix}.ln_post"), d),
            blocks,
            prefix,
            cfg,
        })
    }

    pub fn cls_name(&self) -> String {
        format!("{}.cls", self.prefix)
    }

    pub fn pos_name(&self) -> String {
        format!("{}.pos", self.prefix)
    }

    pub fn init(&self, ps: &mut ParamSet, rng: &mut impl Rng) {
        let d = self.cfg.embed_dim;
        self.patch.init(ps, rng);
        ps.insert(self.cls_name(), init::normal(&[1, d], init::WEIGHT_STD, rng), true);
        ps.insert(
            self.pos_name(),
            init::normal(&[self.cfg.num_patches() + 1, d], init::WEIGHT_STD, rng),
            true,
        );
        for b in &self.blocks {
            b.init(ps, rng);
        }
        self.ln_post.init(ps);
    }

    /// Parameter-name prefix of block `i`, e.g. `video.block3.`.
    pub fn block_prefix(&self, i: usize) -> String {
        format!("{}.block{i}.", self.prefix)
    }

    /// Encodes `images` (all `C x H x W` with the same extents) into `B x d`.
    ///
    /// Inputs whose patch grid differs from the native one use a bilinearly
    /// interpolated positional table.
    pub fn forward(&self, g: &mut Graph, images: &[&Tensor]) -> Result<Var> {
        ensure_arg!(!images.is_empty(), "no images to encode");
        let shape = images[0].shape().to_vec();
        ensure_arg!(
            shape.len() == 3 && shape[0] == self.cfg.in_channels,
            "expected {} x H x W image, got {shape:?}",
            self.cfg.in_channels
        );
        ensure_arg!(
            images.iter().all(|im| im.shape() == shape.as_slice()),
            "images in a batch must share a shape"
        );
        let ps = self.cfg.patch_size;
        if shape[1] % ps != 0 || shape[2] % ps != 0 {
            return Err(MovError::invalid(format!(
                "image {}x{} not divisible by patch size {ps}",
                shape[1], shape[2]
            )));
        }
        let grid = (shape[1] / ps, shape[2] / ps);
        let n = grid.0 * grid.1;
        let patches: Vec<Tensor> = images
            .iter()
            .map(|im| patchify(im, ps))
            .collect::<Result<_>>()?;
        let x = g.constant(Tensor::vstack(&patches)?);
        let tok = self.patch.forward(g, x)?;
        let cls = g.param(&self.cls_name())?;
        let seg = vec![n; images.len()];
        let z = g.prepend_row(tok, cls, &seg)?;
        let pos = g.param(&self.pos_name())?;
        let pos = if grid == self.cfg.grid() {
            pos
        } else {
            let m = g.constant(pos_interpolation_matrix(self.cfg.grid(), grid)?);
            g.matmul(m, pos)?
        };
        let mut z = g.add_block(z, pos)?;
        let seg1 = vec![n + 1; images.len()];
        for b in &self.blocks {
            z = b.forward(g, z, &seg1)?;
        }
        let cls_out = g.first_of_segments(z, &seg1)?;
        self.ln_post.forward(g, cls_out)
    }
}

/// Pooled embedding of one image.
pub fn vit_encode(image: &Tensor, params: &ParamSet, vit: &Vit) -> Result<Tensor> {
    let mut g = Graph::new(params);
    let out = vit.forward(&mut g, &[image])?;
    let t = g.value(out).clone();
    t.ensure_finite("vit_encode")?;
    Ok(t.reshape(&[vit.cfg.embed_dim])?)
}

/// Encodes a clip frame by frame into an `N x d` matrix.
pub fn vit_encode_frames(frames: &[Tensor], params: &ParamSet, vit: &Vit) -> Result<Tensor> {
    let mut g = Graph::new(params);
    let refs: Vec<&Tensor> = frames.iter().collect();
    let out = vit.forward(&mut g, &refs)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (Vit, ParamSet) {
        let cfg = VitConfig {
            image_hw: (16, 16),
            in_channels: 3,
            patch_size: 8,
            embed_dim: 16,
            layers: 2,
            heads: 4,
            mlp_ratio: 2,
        };
        let vit = Vit::new("v", cfg).unwrap();
        let mut ps = ParamSet::new();
        vit.init(&mut ps, &mut ChaCha8Rng::seed_from_u64(0));
        (vit, ps)
    }

    fn image(seed: u64, h: usize, w: usize) -> Tensor {
        init::normal(&[3, h, w], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn patch_counts() {
        assert_eq!(patchify(&Tensor::zeros(&[3, 224, 224]), 16).unwrap().rows(), 196);
        assert_eq!(patchify(&Tensor::zeros(&[3, 32, 32]), 16).unwrap().rows(), 4);
        assert!(matches!(
            patchify(&Tensor::zeros(&[3, 30, 32]), 16),
            Err(MovError::Config(_))
        ));
        let cfg = VitConfig {
            image_hw: (224, 224),
            patch_size: 16,
            embed_dim: 768,
            heads: 12,
            ..Default::default()
        };
        assert_eq!(cfg.num_patches() + 1, 197);
    }

    #[test]
    fn patch_layout() {
        let img = Tensor::from_fn(&[2, 4, 4], |i| i as f64);
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), &[4, 8]);
        // patch (0, 1): channel 0 rows 0..2 cols 2..4, then channel 1
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0, 18.0, 19.0, 22.0, 23.0]);
    }

    #[test]
    fn zero_image_zero_tokens() {
        let (vit, mut ps) = small();
        ps.get_mut("v.patch.b").unwrap().value = Tensor::zeros(&[16]);
        let mut g = Graph::new(&ps);
        let x = g.constant(patchify(&Tensor::zeros(&[3, 16, 16]), 8).unwrap());
        let t = vit.patch.forward(&mut g, x).unwrap();
        assert_eq!(g.value(t).max_abs(), 0.0);
    }

    #[test]
    fn interpolation_identity_and_ramp() {
        let pe = Tensor::from_fn(&[5, 3], |i| (i as f64).sin());
        assert_eq!(interpolate_pos_encoding(&pe, (2, 2), (2, 2)).unwrap(), pe);
        // ramp: value = 10*y + x on the 2x2 grid, one column
        let mut ramp = Tensor::zeros(&[5, 1]);
        ramp.data_mut().copy_from_slice(&[-7.0, 0.0, 1.0, 10.0, 11.0]);
        let out = interpolate_pos_encoding(&ramp, (2, 2), (3, 3)).unwrap();
        assert_eq!(out.data()[0], -7.0);
        let want = [0.0, 0.5, 1.0, 5.0, 5.5, 6.0, 10.0, 10.5, 11.0];
        for (a, b) in out.data()[1..].iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(interpolate_pos_encoding(&ramp, (2, 2), (0, 3)).is_err());
    }

    #[test]
    fn cls_row_bitwise_unchanged() {
        let pe = init::normal(&[17, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let out = interpolate_pos_encoding(&pe, (4, 4), (16, 8)).unwrap();
        assert_eq!(out.rows(), 129);
        assert!(out.row(0).iter().zip(pe.row(0)).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn deterministic_and_position_sensitive() {
        let (vit, ps) = small();
        let a = image(1, 16, 16);
        let e1 = vit_encode(&a, &ps, &vit).unwrap();
        let e2 = vit_encode(&a, &ps, &vit).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(e1.numel(), 16);
        // swap patch (0,0) with patch (1,1)
        let mut b = a.clone();
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    let i = (c * 16 + y) * 16 + x;
                    let j = (c * 16 + y + 8) * 16 + x + 8;
                    b.data_mut().swap(i, j);
                }
            }
        }
        let e3 = vit_encode(&b, &ps, &vit).unwrap();
        assert!(e1.max_abs_diff(&e3) > 1e-9);
    }

    #[test]
    fn batch_matches_single() {
        let (vit, ps) = small();
        let frames: Vec<Tensor> = (0..5).map(|s| image(s, 16, 16)).collect();
        let m = vit_encode_frames(&frames, &ps, &vit).unwrap();
        assert_eq!(m.shape(), &[5, 16]);
        for (i, f) in frames.iter().enumerate() {
            let e = vit_encode(f, &ps, &vit).unwrap();
            for (a, b) in m.row(i).iter().zip(e.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn other_resolution_keeps_width() {
        let (vit, ps) = small();
        let e = vit_encode(&image(2, 32, 24), &ps, &vit).unwrap();
        assert_eq!(e.numel(), 16);
    }
}
